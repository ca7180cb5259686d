//! Volume overlap and surface-distance metrics, tumor-size strata and the
//! evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::grid::{Grid3, Mask3D};
use crate::percentile;
use crate::{Error, Result};

/// Dice coefficient; two empty masks agree perfectly.
pub fn dsc(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Set voxels with at least one face neighbour unset or outside the grid.
pub fn surface(mask: &Mask3D) -> Mask3D {
    let (d, h, w) = mask.shape();
    Grid3::from_fn((d, h, w), |z, y, x| {
        if !mask[(z, y, x)] {
            return false;
        }
        let outside_or_unset = |z: Option<usize>, y: Option<usize>, x: Option<usize>| match (z, y, x) {
            (Some(z), Some(y), Some(x)) if z < d && y < h && x < w => !mask[(z, y, x)],
            _ => true,
        };
        outside_or_unset(z.checked_sub(1), Some(y), Some(x))
            || outside_or_unset(Some(z + 1), Some(y), Some(x))
            || outside_or_unset(Some(z), y.checked_sub(1), Some(x))
            || outside_or_unset(Some(z), Some(y + 1), Some(x))
            || outside_or_unset(Some(z), Some(y), x.checked_sub(1))
            || outside_or_unset(Some(z), Some(y), Some(x + 1))
    })
}

/// 1D lower envelope of parabolas (Felzenszwalb & Huttenlocher) with sample
/// spacing `step`. `f` holds squared distances in mm², `INFINITY` where no
/// site exists.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k: usize = 0;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * (pos(q) - pos(p)));
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// voxel of `sites`, with anisotropic `spacing`. All `INFINITY` when empty.
pub fn squared_distance_field(sites: &Mask3D, spacing: [f64; 3]) -> Grid3<f64> {
    let (d, h, w) = sites.shape();
    let mut field = sites.map(|&s| if s { 0.0 } else { f64::INFINITY });
    let longest = d.max(h).max(w);
    let mut buf = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    let data = field.data_mut();
    let idx = |a: usize, b: usize, c: usize| (a * h + b) * w + c;
    // x lines
    for a in 0..d {
        for b in 0..h {
            for c in 0..w {
                buf[c] = data[idx(a, b, c)];
            }
            edt_1d(&buf[..w], spacing[2], &mut out[..w], &mut v, &mut z);
            for c in 0..w {
                data[idx(a, b, c)] = out[c];
            }
        }
    }
    // y lines
    for a in 0..d {
        for c in 0..w {
            for b in 0..h {
                buf[b] = data[idx(a, b, c)];
            }
            edt_1d(&buf[..h], spacing[1], &mut out[..h], &mut v, &mut z);
            for b in 0..h {
                data[idx(a, b, c)] = out[b];
            }
        }
    }
    // z lines
    for b in 0..h {
        for c in 0..w {
            for a in 0..d {
                buf[a] = data[idx(a, b, c)];
            }
            edt_1d(&buf[..d], spacing[0], &mut out[..d], &mut v, &mut z);
            for a in 0..d {
                data[idx(a, b, c)] = out[a];
            }
        }
    }
    field
}

/// Physical diagonal of the grid, the default penalty when exactly one
/// mask is empty.
pub fn volume_diagonal_mm(shape: (usize, usize, usize), spacing: [f64; 3]) -> f64 {
    let (d, h, w) = shape;
    ((d as f64 * spacing[0]).powi(2) + (h as f64 * spacing[1]).powi(2) + (w as f64 * spacing[2]).powi(2))
        .sqrt()
}

/// Directed surface distances from every surface voxel of `from` to the
/// surface of `to`, in mm.
fn directed_surface_distances(from: &Mask3D, to_field: &Grid3<f64>) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_field.data())
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// 95th nearest-rank percentile of the pooled symmetric surface distances.
///
/// Both empty gives 0. Exactly one empty gives `penalty_mm`, or the volume
/// diagonal when `None`.
pub fn hd95(a: &Mask3D, b: &Mask3D, spacing: [f64; 3], penalty_mm: Option<f64>) -> Result<f64> {
    a.check_same_shape(b)?;
    match (a.any(), b.any()) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Ok(penalty_mm.unwrap_or_else(|| volume_diagonal_mm(a.shape(), spacing)))
        }
        _ => {}
    }
    let (sa, sb) = (surface(a), surface(b));
    let mut dists = directed_surface_distances(&sa, &squared_distance_field(&sb, spacing));
    dists.extend(directed_surface_distances(&sb, &squared_distance_field(&sa, spacing)));
    dists.sort_by(f64::total_cmp);
    Ok(percentile::of_sorted(&dists, 95.0).expect("both surfaces are nonempty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeGroup {
    Tiny,
    Small,
    Medium,
    Large,
    Huge,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 5] = [
        SizeGroup::Tiny,
        SizeGroup::Small,
        SizeGroup::Medium,
        SizeGroup::Large,
        SizeGroup::Huge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SizeGroup::Tiny => "Tiny",
            SizeGroup::Small => "Small",
            SizeGroup::Medium => "Medium",
            SizeGroup::Large => "Large",
            SizeGroup::Huge => "Huge",
        }
    }
}

/// Quintile bins at the nearest-rank 20/40/60/80th percentiles of size; a
/// size equal to a boundary falls in the lower bin.
pub fn size_strata(gt_sizes: &[usize]) -> Vec<SizeGroup> {
    let sorted: Vec<f64> = {
        let mut s: Vec<f64> = gt_sizes.iter().map(|&x| x as f64).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    let bounds: Vec<f64> = [20.0, 40.0, 60.0, 80.0]
        .iter()
        .filter_map(|&p| percentile::of_sorted(&sorted, p))
        .collect();
    gt_sizes
        .iter()
        .map(|&s| {
            let above = bounds.iter().filter(|&&b| (s as f64) > b).count();
            SizeGroup::ALL[above]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub dsc: f64,
    pub hd95_mm: f64,
    pub gt_size_voxels: usize,
    pub size_group: SizeGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub dsc: MeanStd,
    pub hd95_mm: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub overall: GroupSummary,
    pub groups: BTreeMap<SizeGroup, GroupSummary>,
}

fn summarize(rows: &[&VolumeMetrics]) -> Option<GroupSummary> {
    let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let h: Vec<f64> = rows.iter().map(|r| r.hd95_mm).collect();
    Some(GroupSummary {
        dsc: MeanStd::of(&d)?,
        hd95_mm: MeanStd::of(&h)?,
    })
}

/// Per-volume metrics for prediction/ground-truth pairs keyed by volume id.
pub struct EvalCase<'a> {
    pub volume_id: &'a str,
    pub prediction: &'a Mask3D,
    pub ground_truth: &'a Mask3D,
    pub spacing: [f64; 3],
}

pub fn evaluate(cases: &[EvalCase<'_>], penalty_mm: Option<f64>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        rows.push(VolumeMetrics {
            volume_id: c.volume_id.to_string(),
            dsc: dsc(c.prediction, c.ground_truth)?,
            hd95_mm: hd95(c.prediction, c.ground_truth, c.spacing, penalty_mm)?,
            gt_size_voxels: c.ground_truth.count(),
            size_group: SizeGroup::Tiny,
        });
    }
    let sizes: Vec<usize> = rows.iter().map(|r| r.gt_size_voxels).collect();
    for (row, g) in rows.iter_mut().zip(size_strata(&sizes)) {
        row.size_group = g;
    }
    let all: Vec<&VolumeMetrics> = rows.iter().collect();
    let overall = summarize(&all).expect("cases are nonempty");
    let mut groups = BTreeMap::new();
    for g in SizeGroup::ALL {
        let members: Vec<&VolumeMetrics> = rows.iter().filter(|r| r.size_group == g).collect();
        if let Some(s) = summarize(&members) {
            groups.insert(g, s);
        }
    }
    Ok(MetricsReport {
        per_volume: rows,
        overall,
        groups,
    })
}

/// Match predictions to ground truths by id; any difference is an error.
pub fn evaluate_by_id(
    predictions: &BTreeMap<String, Mask3D>,
    ground_truths: &BTreeMap<String, (Mask3D, [f64; 3])>,
    penalty_mm: Option<f64>,
) -> Result<MetricsReport> {
    let only_pred: Vec<String> = predictions
        .keys()
        .filter(|k| !ground_truths.contains_key(*k))
        .cloned()
        .collect();
    let only_gt: Vec<String> = ground_truths
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .cloned()
        .collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::IdMismatch { only_pred, only_gt });
    }
    let cases: Vec<EvalCase<'_>> = predictions
        .iter()
        .map(|(id, p)| {
            let (gt, spacing) = &ground_truths[id];
            EvalCase {
                volume_id: id,
                prediction: p,
                ground_truth: gt,
                spacing: *spacing,
            }
        })
        .collect();
    evaluate(&cases, penalty_mm)
}

impl MetricsReport {
    /// Aligned plain-text table: overall DSC and HD95 followed by the five
    /// size-group DSC columns, DSC in percent.
    pub fn to_table(&self, method: &str) -> String {
        let pct = |m: &MeanStd| format!("{:.2}±{:.2}", m.mean * 100.0, m.std * 100.0);
        let mm = |m: &MeanStd| format!("{:.2}±{:.2}", m.mean, m.std);
        let mut header = vec![
            "Method".to_string(),
            "N".to_string(),
            "DSC(%)".to_string(),
            "HD95(mm)".to_string(),
        ];
        let mut row = vec![
            method.to_string(),
            self.overall.dsc.n.to_string(),
            pct(&self.overall.dsc),
            mm(&self.overall.hd95_mm),
        ];
        for g in SizeGroup::ALL {
            header.push(g.name().to_string());
            row.push(self.groups.get(&g).map_or("-".to_string(), |s| pct(&s.dsc)));
        }
        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.chars().count().max(r.chars().count()))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let pad = w - cell.chars().count();
                let _ = write!(s, "{cell}{}", " ".repeat(pad));
            }
            s.trim_end().to_string()
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
        format!("{}\n{}\n{}\n", line(&header), rule, line(&row))
    }
}
