//! Deterministic closed-form stand-ins for the learned models.
//!
//! They are built so that bright blobs inside the brain behave like tumors
//! end to end: the embedder sees bright tails in the intensity histogram,
//! the classifier's pseudo-gradients peak on bright regions, the promptable
//! segmenter region-grows from its foreground point, and the trainable 3D
//! segmenter thresholds inside regions learned from its training labels.
//! Every output is a pure function of the inputs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, BackendResult, Capability,
    ClassifierOutput, LabeledImage, LayerMaps, ModelBlob, SegmenterSample,
};
use crate::fsutil::sha256_hex;
use crate::grid::{Grid2, Grid3, Mask2D, Mask3D};
use crate::labeling::{DEFAULT_NORMAL_PROMPT, DEFAULT_TUMOR_PROMPT};
use crate::percentile;
use crate::prompting::PromptSet;
use crate::volume::Volume;

/// Histogram bins of width 0.5 over `[-4, 8)` in normalized units.
const HIST_BINS: usize = 24;
const HIST_LO: f64 = -4.0;
const HIST_WIDTH: f64 = 0.5;
/// Bins at or above this index (z >= 2.5) count as hyperintense.
const BRIGHT_BIN: usize = 13;
/// Slot set only for images without any brain pixel.
const EMPTY_SLOT: usize = HIST_BINS;
pub const EMBED_DIM: usize = HIST_BINS + 1;

pub const LAYER_ID: &str = "analytic0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticConfig {
    /// Minimum contrast between the two Otsu classes of a prompt box.
    pub tau: f64,
    /// Gaussian sigma (pixels) applied to the classifier's pseudo-gradients.
    pub smoothing_sigma: f64,
    /// Lower bound on the classifier's learned intensity floor.
    pub min_floor: f64,
    /// Weight of the hyperintense bins in the tumor text template.
    pub tumor_weight: f64,
    /// Prompts mapped onto the normal / tumor text templates.
    pub text_prompts: [String; 2],
    /// Voxels added around each label's bounding box when learning supports.
    pub support_margin: usize,
    /// Extra margin around the union support used for unseen volumes.
    pub global_margin: usize,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            smoothing_sigma: 1.0,
            min_floor: 1.0,
            tumor_weight: 0.05,
            text_prompts: [DEFAULT_NORMAL_PROMPT.into(), DEFAULT_TUMOR_PROMPT.into()],
            support_margin: 2,
            global_margin: 4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AnalyticBackend {
    config: AnalyticConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierModel {
    kind: String,
    floor: f64,
}

/// Inclusive `[d0, r0, c0, d1, r1, c1]`.
type Box3 = [usize; 6];

#[derive(Debug, Serialize, Deserialize)]
struct SegmenterModel {
    kind: String,
    offset: f64,
    global_support: Option<Box3>,
    supports: BTreeMap<String, Box3>,
}

const CLASSIFIER_KIND: &str = "analytic-classifier";
const SEGMENTER_KIND: &str = "analytic-segmenter";

impl AnalyticBackend {
    pub fn new(config: AnalyticConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &AnalyticConfig {
        &self.config
    }

    fn classifier(&self, model: &ModelBlob) -> BackendResult<ClassifierModel> {
        let m: ClassifierModel = serde_json::from_slice(&model.0)
            .map_err(|e| BackendError::state(format!("classifier is not trained: {e}")))?;
        if m.kind != CLASSIFIER_KIND {
            return Err(BackendError::state(format!("`{}` is not a classifier", m.kind)));
        }
        Ok(m)
    }

    fn segmenter(&self, model: &ModelBlob) -> BackendResult<SegmenterModel> {
        let m: SegmenterModel = serde_json::from_slice(&model.0)
            .map_err(|e| BackendError::state(format!("segmenter is not trained: {e}")))?;
        if m.kind != SEGMENTER_KIND {
            return Err(BackendError::state(format!("`{}` is not a segmenter", m.kind)));
        }
        Ok(m)
    }

    /// Smoothed positive excess of intensity over `median + floor`, brain only.
    fn pseudo_gradient(&self, image: &Grid2<f32>, floor: f64) -> Grid2<f64> {
        let brain: Vec<f64> = image
            .data()
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| v as f64)
            .collect();
        let Some(median) = percentile::percentile(&brain, 50.0) else {
            return Grid2::filled(image.rows(), image.cols(), 0.0);
        };
        let excess = image.map(|&v| {
            if v == 0.0 {
                0.0
            } else {
                (v as f64 - median - floor).max(0.0)
            }
        });
        gaussian_smooth(&excess, self.config.smoothing_sigma)
    }
}

fn brain_values(image: &Grid2<f32>) -> impl Iterator<Item = f64> + '_ {
    image.data().iter().filter(|&&v| v != 0.0).map(|&v| v as f64)
}

/// Separable Gaussian blur truncated at 3 sigma with zero padding.
pub fn gaussian_smooth(g: &Grid2<f64>, sigma: f64) -> Grid2<f64> {
    if sigma <= 0.0 {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (h, w) = g.shape();
    let pass = |src: &Grid2<f64>, horizontal: bool| {
        Grid2::from_fn(h, w, |r, c| {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                let (rr, cc) = if horizontal {
                    (r as isize, c as isize + off)
                } else {
                    (r as isize + off, c as isize)
                };
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    acc += kv * src[(rr as usize, cc as usize)];
                }
            }
            acc
        })
    };
    pass(&pass(g, true), false)
}

/// Otsu threshold over a 256-bin histogram; voxels strictly above the
/// returned value form the bright class.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return None;
    }
    if hi <= lo {
        return Some(hi);
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &n) in hist.iter().enumerate().take(BINS - 1) {
        w0 += n as f64;
        sum0 += k as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, k);
        }
    }
    Some(lo + (best.1 + 1) as f64 * width)
}

fn clip_box(b: [usize; 3], e: [usize; 3], margin: usize, shape: (usize, usize, usize)) -> Box3 {
    let dims = [shape.0, shape.1, shape.2];
    let mut out = [0usize; 6];
    for k in 0..3 {
        out[k] = b[k].saturating_sub(margin);
        out[k + 3] = (e[k] + margin).min(dims[k] - 1);
    }
    out
}

fn in_box(bx: &Box3, d: usize, r: usize, c: usize) -> bool {
    (bx[0]..=bx[3]).contains(&d) && (bx[1]..=bx[4]).contains(&r) && (bx[2]..=bx[5]).contains(&c)
}

/// Brain voxels inside `support`, with their flat indices.
fn support_values(volume: &Volume, support: &Box3) -> Vec<(usize, f64)> {
    let (d, h, w) = volume.shape();
    let mut out = Vec::new();
    for z in support[0]..=support[3].min(d - 1) {
        for y in support[1]..=support[4].min(h - 1) {
            for x in support[2]..=support[5].min(w - 1) {
                let v = volume.voxels[(z, y, x)];
                if v != 0.0 {
                    out.push(((z * h + y) * w + x, v as f64));
                }
            }
        }
    }
    out
}

const OFFSET_GRID: [f64; 21] = [
    0.0, -0.1, 0.1, -0.2, 0.2, -0.3, 0.3, -0.4, 0.4, -0.5, 0.5, -0.6, 0.6, -0.7, 0.7, -0.8, 0.8,
    -0.9, 0.9, -1.0, 1.0,
];

impl Backend for AnalyticBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Analytic,
            capabilities: BTreeSet::from([
                Capability::EmbedImage,
                Capability::EmbedText,
                Capability::TrainClassifier,
                Capability::GradientMaps,
                Capability::SegmentPrompted,
                Capability::TrainSegmenter,
                Capability::PredictVolume,
            ]),
            layer_ids: vec![LAYER_ID.to_string()],
        }
    }

    /// Log-compressed histogram of brain intensities, L2-normalized. An image
    /// without brain pixels embeds to the unit vector on the empty slot.
    fn embed_image(&self, image: &Grid2<f32>) -> BackendResult<Vec<f64>> {
        let mut counts = [0usize; HIST_BINS];
        let mut any = false;
        for v in brain_values(image) {
            any = true;
            let b = ((v - HIST_LO) / HIST_WIDTH).floor().clamp(0.0, (HIST_BINS - 1) as f64);
            counts[b as usize] += 1;
        }
        let mut e = vec![0.0; EMBED_DIM];
        if !any {
            e[EMPTY_SLOT] = 1.0;
            return Ok(e);
        }
        for (slot, &n) in e.iter_mut().zip(&counts) {
            *slot = (n as f64).ln_1p();
        }
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(e.into_iter().map(|x| x / norm).collect())
    }

    /// The configured normal prompt maps to indicator weights on the typical
    /// bins, the tumor prompt additionally weights the hyperintense bins.
    /// Any other text gets a fixed hash-derived vector.
    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>> {
        let mut e = vec![0.0; EMBED_DIM];
        if text == self.config.text_prompts[0] || text == self.config.text_prompts[1] {
            for slot in e.iter_mut().take(BRIGHT_BIN) {
                *slot = 1.0;
            }
            if text == self.config.text_prompts[1] {
                for slot in e.iter_mut().take(HIST_BINS).skip(BRIGHT_BIN) {
                    *slot = self.config.tumor_weight;
                }
            }
            return Ok(e);
        }
        let digest = hex::decode(sha256_hex(text.as_bytes())).expect("hex from sha256");
        for (i, slot) in e.iter_mut().enumerate() {
            *slot = digest[i % digest.len()] as f64 / 255.0 + 0.01;
        }
        Ok(e)
    }

    /// Learns the intensity floor as half the median peak excess of the
    /// positive slices, bounded below by `min_floor`.
    fn train_classifier(&self, samples: &[LabeledImage]) -> BackendResult<ModelBlob> {
        if samples.is_empty() {
            return Err(BackendError::invalid("no training slices"));
        }
        let mut peaks = Vec::new();
        for s in samples.iter().filter(|s| s.label == 1) {
            let vals: Vec<f64> = brain_values(&s.image).collect();
            if let Some(median) = percentile::percentile(&vals, 50.0) {
                let peak = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                peaks.push(peak - median);
            }
        }
        let floor = percentile::percentile(&peaks, 50.0)
            .map_or(self.config.min_floor, |m| (0.5 * m).max(self.config.min_floor));
        let model = ClassifierModel {
            kind: CLASSIFIER_KIND.into(),
            floor,
        };
        Ok(ModelBlob(serde_json::to_vec(&model).expect("model serializes")))
    }

    fn classify_with_maps(
        &self,
        model: &ModelBlob,
        image: &Grid2<f32>,
    ) -> BackendResult<ClassifierOutput> {
        let m = self.classifier(model)?;
        let g = self.pseudo_gradient(image, m.floor);
        let peak = g.data().iter().cloned().fold(0.0f64, f64::max);
        let probability = peak / (peak + m.floor);
        let grid = g.map(|&v| v as f32);
        Ok(ClassifierOutput {
            probability,
            layers: vec![LayerMaps {
                id: LAYER_ID.into(),
                gradients: vec![grid.clone()],
                activations: Some(vec![grid]),
            }],
            cam: None,
        })
    }

    /// Region growing from the foreground point over pixels strictly above
    /// the Otsu threshold of the brain pixels in and around the box, clipped
    /// to the box.
    /// When the two Otsu classes differ by less than `tau` the box holds no
    /// distinct object and only the clicked pixel is returned. Background
    /// points that are themselves dark block their 4-neighbourhood.
    fn segment_prompted(&self, image: &Grid2<f32>, prompts: &PromptSet) -> BackendResult<Mask2D> {
        prompts
            .validate(image.shape())
            .map_err(|e| BackendError::invalid(e.to_string()))?;
        let fg = prompts.foreground().expect("validated");
        let (h, w) = image.shape();
        // statistics include a one-pixel ring so a tight box still sees background
        let [r0, c0, r1, c1] = prompts.bbox;
        let (r0, c0) = (r0.saturating_sub(1), c0.saturating_sub(1));
        let (r1, c1) = ((r1 + 1).min(h - 1), (c1 + 1).min(w - 1));
        let in_box: Vec<f64> = (r0..=r1)
            .flat_map(|r| (c0..=c1).map(move |c| (r, c)))
            .map(|p| image[p] as f64)
            .filter(|&v| v != 0.0)
            .collect();
        let cut = otsu_threshold(&in_box).unwrap_or(f64::INFINITY);
        let (mut hi, mut lo) = ((0.0, 0usize), (0.0, 0usize));
        for &v in &in_box {
            let acc = if v > cut { &mut hi } else { &mut lo };
            acc.0 += v;
            acc.1 += 1;
        }
        let contrast = if hi.1 == 0 || lo.1 == 0 {
            0.0
        } else {
            hi.0 / hi.1 as f64 - lo.0 / lo.1 as f64
        };
        if contrast < self.config.tau || (image[fg] as f64) <= cut {
            let mut out = Mask2D::filled(h, w, false);
            out[fg] = true;
            return Ok(out);
        }
        let mut blocked = Mask2D::filled(h, w, false);
        for (r, c) in prompts.background() {
            if (image[(r, c)] as f64) > cut {
                continue;
            }
            for (nr, nc) in [
                (Some(r), Some(c)),
                (r.checked_sub(1), Some(c)),
                (Some(r + 1), Some(c)),
                (Some(r), c.checked_sub(1)),
                (Some(r), Some(c + 1)),
            ] {
                if let (Some(nr), Some(nc)) = (nr, nc) {
                    if nr < h && nc < w {
                        blocked[(nr, nc)] = true;
                    }
                }
            }
        }
        let mut out = Mask2D::filled(h, w, false);
        out[fg] = true;
        let mut queue = VecDeque::from([fg]);
        while let Some((r, c)) = queue.pop_front() {
            for (nr, nc) in [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ] {
                if nr >= h || nc >= w || out[(nr, nc)] || blocked[(nr, nc)] {
                    continue;
                }
                if prompts.contains((nr, nc)) && (image[(nr, nc)] as f64) > cut {
                    out[(nr, nc)] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        Ok(out)
    }

    /// Remembers each labelled volume's support (label bounding box plus a
    /// margin) and a global offset on top of the per-volume Otsu threshold,
    /// picked to maximize mean Dice against the labels.
    fn train_segmenter(&self, pool: &[SegmenterSample]) -> BackendResult<ModelBlob> {
        if pool.is_empty() {
            return Err(BackendError::invalid("empty training pool"));
        }
        let mut supports = BTreeMap::new();
        let mut global: Option<Box3> = None;
        // per sample: brain values inside the support, sorted, with label flags
        let mut fits: Vec<(f64, Vec<(f64, bool)>, usize)> = Vec::new();
        for s in pool {
            if s.volume.shape() != s.label.shape() {
                return Err(BackendError::invalid(format!(
                    "label shape {:?} differs from volume {:?}",
                    s.label.shape(),
                    s.volume.shape()
                )));
            }
            let Some((lo, hi)) = s.label.bounding_box() else {
                continue;
            };
            let support = clip_box(lo, hi, self.config.support_margin, s.volume.shape());
            let outer = clip_box(lo, hi, self.config.global_margin, s.volume.shape());
            global = Some(match global {
                None => outer,
                Some(g) => {
                    let mut u = g;
                    for k in 0..3 {
                        u[k] = u[k].min(outer[k]);
                        u[k + 3] = u[k + 3].max(outer[k + 3]);
                    }
                    u
                }
            });
            supports.insert(s.volume.id.clone(), support);
            let vals = support_values(&s.volume, &support);
            let plain: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let Some(t) = otsu_threshold(&plain) else {
                continue;
            };
            let labels = s.label.data();
            let mut flagged: Vec<(f64, bool)> = vals.iter().map(|&(i, v)| (v, labels[i])).collect();
            flagged.sort_by(|a, b| a.0.total_cmp(&b.0));
            fits.push((t, flagged, s.label.count()));
        }
        let mut best = (f64::NEG_INFINITY, 0.0);
        for &offset in &OFFSET_GRID {
            let mut total = 0.0;
            for (t, flagged, label_count) in &fits {
                let cut = t + offset;
                let start = flagged.partition_point(|&(v, _)| v <= cut);
                let predicted = flagged.len() - start;
                let hits = flagged[start..].iter().filter(|x| x.1).count();
                let denom = predicted + label_count;
                total += if denom == 0 { 1.0 } else { 2.0 * hits as f64 / denom as f64 };
            }
            let score = if fits.is_empty() { 0.0 } else { total / fits.len() as f64 };
            if score > best.0 {
                best = (score, offset);
            }
        }
        let model = SegmenterModel {
            kind: SEGMENTER_KIND.into(),
            offset: best.1,
            global_support: global,
            supports,
        };
        Ok(ModelBlob(serde_json::to_vec(&model).expect("model serializes")))
    }

    fn predict_volume(&self, model: &ModelBlob, volume: &Volume) -> BackendResult<Mask3D> {
        let m = self.segmenter(model)?;
        let (d, h, w) = volume.shape();
        let full = [0, 0, 0, d - 1, h - 1, w - 1];
        let support = m
            .supports
            .get(&volume.id)
            .or(m.global_support.as_ref())
            .copied()
            .unwrap_or(full);
        let vals = support_values(volume, &support);
        let plain: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let mut out = Grid3::filled((d, h, w), false);
        if let Some(t) = otsu_threshold(&plain) {
            let cut = t + m.offset;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let v = volume.voxels[(z, y, x)];
                        out[(z, y, x)] = v != 0.0 && in_box(&support, z, y, x) && v as f64 > cut;
                    }
                }
            }
        }
        Ok(out)
    }
}
