//! Slice-level labels from embedding similarity, class activation maps built
//! from per-channel gradients, percentile thresholding, and masking-based
//! augmentation of the classifier's training slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Grid2, Mask2D};
use crate::percentile;
use crate::{Error, Result};

/// Default prompt for class 0 (no tumor).
pub const DEFAULT_NORMAL_PROMPT: &str = "an image of brain tissue showing typical signal intensity without any regions of abnormal intensity or suspicious mass";
/// Default prompt for class 1 (tumor).
pub const DEFAULT_TUMOR_PROMPT: &str = "an image of brain tissue showing a tumor with uneven hyperintensity and irregular borders distinct from surroundings";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub probs: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64], na: f64) -> f64 {
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Softmax over cosine similarities between one image embedding and one
/// text embedding per class.
pub fn clip_probabilities(image: &[f64], texts: &[Vec<f64>]) -> Result<ClassProbabilities> {
    if texts.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two classes, got {}",
            texts.len()
        )));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ni = norm(image);
    if !(ni > 0.0) || !ni.is_finite() {
        return Err(Error::InvalidEmbedding("image embedding has zero norm".into()));
    }
    let mut sims = Vec::with_capacity(texts.len());
    for (c, t) in texts.iter().enumerate() {
        if t.len() != image.len() {
            return Err(Error::Shape(format!(
                "text embedding {c} has dimension {}, image has {}",
                t.len(),
                image.len()
            )));
        }
        let nt = norm(t);
        if !(nt > 0.0) || !nt.is_finite() {
            return Err(Error::InvalidEmbedding(format!(
                "text embedding {c} has zero norm"
            )));
        }
        sims.push(cosine(image, t, ni));
    }
    let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(ClassProbabilities {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

/// Argmax class; ties resolve to the lowest index, i.e. "no tumor".
pub fn assign_label(p: &ClassProbabilities) -> u8 {
    let mut best = 0;
    for (i, &v) in p.probs.iter().enumerate() {
        if v > p.probs[best] {
            best = i;
        }
    }
    best as u8
}

/// How per-channel gradients combine into one activation map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamVariant {
    /// `sum_k mean(G_k) * ReLU(G_k)`.
    #[default]
    Literal,
    /// `sum_k ReLU(G_k) * A_k` with the layer's activations `A_k`.
    Weighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub values: Grid2<f64>,
    pub layer_ids: Vec<String>,
}

fn check_channels(channels: &[Grid2<f64>]) -> Result<(usize, usize)> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Contract("layer has no channels".into()))?;
    let shape = first.shape();
    if let Some(bad) = channels.iter().find(|g| g.shape() != shape) {
        return Err(Error::Shape(format!(
            "channel shape {:?} differs from {:?}",
            bad.shape(),
            shape
        )));
    }
    Ok(shape)
}

/// Single-layer map `ReLU(sum_k w_k * ReLU(G_k))` with `w_k` the spatial mean
/// of channel `k`. The outer ReLU only matters when some `w_k < 0`.
pub fn layer_cam(channel_gradients: &[Grid2<f64>]) -> Result<Grid2<f64>> {
    let (rows, cols) = check_channels(channel_gradients)?;
    let mut out = Grid2::filled(rows, cols, 0.0);
    for g in channel_gradients {
        let w = g.data().iter().sum::<f64>() / g.len() as f64;
        for (o, &v) in out.data_mut().iter_mut().zip(g.data()) {
            *o += w * v.max(0.0);
        }
    }
    for o in out.data_mut() {
        *o = o.max(0.0);
    }
    Ok(out)
}

/// Elementwise-weighted variant: `ReLU(sum_k ReLU(G_k) * A_k)`.
pub fn layer_cam_weighted(
    channel_gradients: &[Grid2<f64>],
    activations: &[Grid2<f64>],
) -> Result<Grid2<f64>> {
    let (rows, cols) = check_channels(channel_gradients)?;
    if activations.len() != channel_gradients.len()
        || activations.iter().any(|a| a.shape() != (rows, cols))
    {
        return Err(Error::Shape(
            "activations must match gradients channel for channel".into(),
        ));
    }
    let mut out = Grid2::filled(rows, cols, 0.0);
    for (g, a) in channel_gradients.iter().zip(activations) {
        for ((o, &gv), &av) in out.data_mut().iter_mut().zip(g.data()).zip(a.data()) {
            *o += gv.max(0.0) * av;
        }
    }
    for o in out.data_mut() {
        *o = o.max(0.0);
    }
    Ok(out)
}

fn min_max_normalize(g: &Grid2<f64>) -> Grid2<f64> {
    let lo = g.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > f64::EPSILON * hi.abs().max(1.0)) {
        return Grid2::filled(g.rows(), g.cols(), 0.0);
    }
    g.map(|v| (v - lo) / span)
}

fn source_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Corner-aligned bilinear resampling.
pub fn bilinear_resize(g: &Grid2<f64>, (rows, cols): (usize, usize)) -> Grid2<f64> {
    if g.shape() == (rows, cols) {
        return g.clone();
    }
    let (h, w) = g.shape();
    Grid2::from_fn(rows, cols, |r, c| {
        let y = source_coord(r, rows, h);
        let x = source_coord(c, cols, w);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = g[(y0, x0)] * (1.0 - fx) + g[(y0, x1)] * fx;
        let bottom = g[(y1, x0)] * (1.0 - fx) + g[(y1, x1)] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Min-max normalize each layer, resample to `target`, fuse by elementwise max.
pub fn fuse_and_upsample(layers: &[CamMap], target: (usize, usize)) -> Result<CamMap> {
    if layers.is_empty() {
        return Err(Error::Contract("no CAM layers to fuse".into()));
    }
    let mut fused = Grid2::filled(target.0, target.1, 0.0f64);
    let mut ids = Vec::new();
    for layer in layers {
        let up = bilinear_resize(&min_max_normalize(&layer.values), target);
        for (f, &v) in fused.data_mut().iter_mut().zip(up.data()) {
            *f = f.max(v.clamp(0.0, 1.0));
        }
        ids.extend(layer.layer_ids.iter().cloned());
    }
    Ok(CamMap {
        values: fused,
        layer_ids: ids,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 100]")));
    }
    Ok(())
}

/// Brain pixels whose CAM value is strictly above the `(100 - alpha)`-th
/// nearest-rank percentile of the CAM over the brain, i.e. roughly the top
/// `alpha`% most activated brain pixels.
pub fn threshold_mask(cam: &Grid2<f64>, alpha: f64, brain: &Mask2D) -> Result<Mask2D> {
    check_alpha(alpha)?;
    if cam.shape() != brain.shape() {
        return Err(Error::Shape(format!(
            "cam {:?} vs brain {:?}",
            cam.shape(),
            brain.shape()
        )));
    }
    let values: Vec<f64> = cam
        .data()
        .iter()
        .zip(brain.data())
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .collect();
    let Some(t) = percentile::percentile(&values, 100.0 - alpha) else {
        return Ok(Mask2D::filled(cam.rows(), cam.cols(), false));
    };
    Ok(Grid2::from_fn(cam.rows(), cam.cols(), |r, c| {
        brain[(r, c)] && cam[(r, c)] > t
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSlice {
    pub pixels: Grid2<f32>,
    pub applied_mask: Mask2D,
    pub label: u8,
}

struct Integral {
    cols: usize,
    sums: Vec<usize>,
}

impl Integral {
    fn new(m: &Mask2D) -> Self {
        let (h, w) = m.shape();
        let cols = w + 1;
        let mut sums = vec![0usize; (h + 1) * cols];
        for r in 0..h {
            for c in 0..w {
                sums[(r + 1) * cols + c + 1] = m[(r, c)] as usize
                    + sums[r * cols + c + 1]
                    + sums[(r + 1) * cols + c]
                    - sums[r * cols + c];
            }
        }
        Self { cols, sums }
    }

    /// Count over the inclusive rectangle.
    fn count(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> usize {
        let s = |r: usize, c: usize| self.sums[r * self.cols + c];
        s(r1 + 1, c1 + 1) + s(r0, c0) - s(r0, c1 + 1) - s(r1 + 1, c0)
    }
}

/// Seeded axis-aligned rectangle inside the brain bounding box whose overlap
/// with the brain is as close as possible to `alpha`% of the brain area
/// (within 2 percentage points whenever a candidate achieves it). The
/// returned mask is the overlap, so it never leaves the brain.
pub fn random_brain_rectangle(brain: &Mask2D, alpha: f64, seed: u64) -> Result<Mask2D> {
    check_alpha(alpha)?;
    let (h, w) = brain.shape();
    let empty = Mask2D::filled(h, w, false);
    let n = brain.count();
    let Some((br0, bc0, br1, bc1)) = brain.bounding_box() else {
        return Ok(empty);
    };
    if alpha == 0.0 {
        return Ok(empty);
    }
    let target = alpha / 100.0 * n as f64;
    let tol = 0.02 * n as f64;
    let integral = Integral::new(brain);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, (usize, usize, usize, usize))> = None;
    for _ in 0..256 {
        let height = rng.gen_range(1..=br1 - br0 + 1);
        let r0 = rng.gen_range(br0..=br1 + 1 - height);
        let r1 = r0 + height - 1;
        let c0 = rng.gen_range(bc0..=bc1);
        let mut local: Option<(f64, usize)> = None;
        for c1 in c0..=bc1 {
            let err = (integral.count(r0, c0, r1, c1) as f64 - target).abs();
            if local.is_none_or(|(e, _)| err < e) {
                local = Some((err, c1));
            }
        }
        let (err, c1) = local.expect("at least one width is tried");
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, (r0, c0, r1, c1)));
        }
        if err <= tol {
            break;
        }
    }
    let (_, (r0, c0, r1, c1)) = best.expect("at least one rectangle is tried");
    Ok(Grid2::from_fn(h, w, |r, c| {
        brain[(r, c)] && (r0..=r1).contains(&r) && (c0..=c1).contains(&c)
    }))
}

/// Mask the most discriminative CAM region of a positive slice, or a random
/// rectangle of matched area on a negative one.
pub fn amda_augment(
    slice: &Grid2<f32>,
    brain: &Mask2D,
    label: u8,
    cam: Option<&Grid2<f64>>,
    alpha: f64,
    seed: u64,
) -> Result<AugmentedSlice> {
    if slice.shape() != brain.shape() {
        return Err(Error::Shape(format!(
            "slice {:?} vs brain {:?}",
            slice.shape(),
            brain.shape()
        )));
    }
    let applied_mask = match (label, cam) {
        (1, Some(cam)) => threshold_mask(cam, alpha, brain)?,
        (1, None) => {
            return Err(Error::Contract(
                "positive slice needs a CAM for augmentation".into(),
            ))
        }
        (0, _) => random_brain_rectangle(brain, alpha, seed)?,
        (other, _) => return Err(Error::Contract(format!("label {other} is not binary"))),
    };
    let mut pixels = slice.clone();
    for (p, &m) in pixels.data_mut().iter_mut().zip(applied_mask.data()) {
        if m {
            *p = 0.0;
        }
    }
    Ok(AugmentedSlice {
        pixels,
        applied_mask,
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn probs(p: &[f64]) -> ClassProbabilities {
        ClassProbabilities { probs: p.to_vec() }
    }

    #[test]
    fn symmetric_similarity_is_uniform() {
        let p = clip_probabilities(&[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((p.probs[0] - 0.5).abs() < 1e-12);
        assert_eq!(assign_label(&p), 0);
    }

    #[test]
    fn cosine_one_vs_zero() {
        let p = clip_probabilities(&[2.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        // independent: e / (e + 1)
        let e = std::f64::consts::E;
        assert!((p.probs[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
        assert!((p.probs[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn scaling_image_embedding_is_invisible() {
        let texts = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.5]];
        let a = clip_probabilities(&[0.2, 0.7, -0.4], &texts).unwrap();
        let b = clip_probabilities(&[1.0, 3.5, -2.0], &texts).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_errors() {
        let texts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            clip_probabilities(&[0.0, 0.0], &texts),
            Err(Error::InvalidEmbedding(_))
        ));
        assert!(matches!(
            clip_probabilities(&[1.0, 0.0, 0.0], &texts),
            Err(Error::Shape(_))
        ));
        assert!(clip_probabilities(&[1.0, 0.0], &texts[..1]).is_err());
    }

    #[test]
    fn labels_from_probabilities() {
        assert_eq!(assign_label(&probs(&[0.9, 0.1])), 0);
        assert_eq!(assign_label(&probs(&[0.2, 0.8])), 1);
        assert_eq!(assign_label(&probs(&[0.5, 0.5])), 0);
    }

    #[test]
    fn layer_cam_uniform_and_negative() {
        let q = layer_cam(&[Grid2::filled(3, 3, 2.0)]).unwrap();
        assert!(q.data().iter().all(|&v| v == 4.0));
        let q = layer_cam(&[Grid2::filled(3, 3, -1.5)]).unwrap();
        assert!(q.data().iter().all(|&v| v == 0.0));
        assert!(layer_cam(&[]).is_err());
    }

    #[test]
    fn layer_cam_mixed_signs_matches_loop() {
        let a = Grid2::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let b = Grid2::from_vec(2, 2, vec![-1.0, 4.0, 0.0, -0.5]).unwrap();
        let q = layer_cam(&[a.clone(), b.clone()]).unwrap();
        let (wa, wb) = (2.5 / 4.0, 2.5 / 4.0);
        for r in 0..2 {
            for c in 0..2 {
                let want = wa * f64::max(a[(r, c)], 0.0) + wb * f64::max(b[(r, c)], 0.0);
                assert!((q[(r, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_variant_uses_activations() {
        let g = Grid2::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
        let a = Grid2::from_vec(1, 2, vec![0.5, 3.0]).unwrap();
        let q = layer_cam_weighted(&[g], &[a]).unwrap();
        assert_eq!(q.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fuse_single_layer_min_max() {
        let layer = CamMap {
            values: Grid2::from_vec(1, 2, vec![0.0, 2.0]).unwrap(),
            layer_ids: vec!["l".into()],
        };
        let f = fuse_and_upsample(&[layer], (1, 2)).unwrap();
        assert_eq!(f.values.data(), &[0.0, 1.0]);
    }

    #[test]
    fn fuse_with_zero_layer_is_identity() {
        let live = CamMap {
            values: Grid2::from_vec(2, 2, vec![1.0, 3.0, 5.0, 2.0]).unwrap(),
            layer_ids: vec!["a".into()],
        };
        let dead = CamMap {
            values: Grid2::filled(2, 2, 0.0),
            layer_ids: vec!["b".into()],
        };
        let f = fuse_and_upsample(&[dead, live], (2, 2)).unwrap();
        assert_eq!(f.values.data(), &[0.0, 0.5, 1.0, 0.25]);
        assert_eq!(f.layer_ids, vec!["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn bilinear_upsample_closed_form() {
        let g = Grid2::from_vec(2, 2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let up = bilinear_resize(&g, (4, 4));
        // f(y, x) = 2y + x + xy on the unit square, sampled at thirds
        for r in 0..4 {
            for c in 0..4 {
                let (y, x) = (r as f64 / 3.0, c as f64 / 3.0);
                let want = 2.0 * y + x + x * y;
                assert!((up[(r, c)] - want).abs() < 1e-12, "({r},{c})");
            }
        }
        assert_eq!(up[(0, 0)], 0.0);
        assert_eq!(up[(3, 3)], 4.0);
    }

    #[test]
    fn alpha_zero_selects_nothing() {
        let cam = Grid2::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let brain = Mask2D::filled(4, 4, true);
        assert!(!threshold_mask(&cam, 0.0, &brain).unwrap().any());
        assert!(threshold_mask(&cam, 120.0, &brain).is_err());
    }

    #[test]
    fn top_twenty_percent_of_hundred() {
        let mut vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        vals.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let cam = Grid2::from_vec(10, 10, vals.clone()).unwrap();
        let brain = Mask2D::filled(10, 10, true);
        let m = threshold_mask(&cam, 20.0, &brain).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = sorted[79];
        for (v, &sel) in vals.iter().zip(m.data()) {
            assert_eq!(sel, *v > cut);
        }
        assert_eq!(m.count(), 20);
    }

    #[test]
    fn threshold_never_leaves_brain() {
        let cam = Grid2::from_fn(6, 6, |r, c| (r + c) as f64);
        let brain = Grid2::from_fn(6, 6, |r, _| r < 3);
        let m = threshold_mask(&cam, 50.0, &brain).unwrap();
        assert!(m.indexed().all(|(r, _, &v)| !v || r < 3));
        let none = Mask2D::filled(6, 6, false);
        assert!(!threshold_mask(&cam, 50.0, &none).unwrap().any());
    }

    #[test]
    fn negative_alpha_zero_is_identity() {
        let slice = Grid2::from_fn(8, 8, |r, c| (r * c) as f32 + 1.0);
        let brain = Mask2D::filled(8, 8, true);
        let a = amda_augment(&slice, &brain, 0, None, 0.0, 1).unwrap();
        assert_eq!(a.pixels, slice);
        assert!(!a.applied_mask.any());
    }

    #[test]
    fn positive_masks_top_of_blob() {
        let slice = Grid2::filled(10, 10, 1.0f32);
        let brain = Mask2D::filled(10, 10, true);
        // distinct values, peaked at (4, 5)
        let cam = Grid2::from_fn(10, 10, |r, c| {
            let d2 = (r as f64 - 4.0).powi(2) + (c as f64 - 5.0).powi(2);
            (-d2 / 8.0).exp() + (r * 10 + c) as f64 * 1e-6
        });
        let a = amda_augment(&slice, &brain, 1, Some(&cam), 20.0, 0).unwrap();
        let mut ranked: Vec<(f64, usize)> =
            cam.data().iter().cloned().zip(0..).collect();
        ranked.sort_by(|x, y| y.0.total_cmp(&x.0));
        let top: std::collections::BTreeSet<usize> = ranked[..20].iter().map(|x| x.1).collect();
        for (i, &m) in a.applied_mask.data().iter().enumerate() {
            assert_eq!(m, top.contains(&i));
            assert_eq!(a.pixels.data()[i], if m { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn positive_without_cam_is_rejected() {
        let slice = Grid2::filled(2, 2, 1.0f32);
        let brain = Mask2D::filled(2, 2, true);
        assert!(matches!(
            amda_augment(&slice, &brain, 1, None, 20.0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn augmentation_is_seeded() {
        let slice = Grid2::from_fn(40, 40, |r, c| (r + c) as f32 + 1.0);
        let brain = Grid2::from_fn(40, 40, |r, c| {
            (r as f64 - 20.0).powi(2) + (c as f64 - 18.0).powi(2) < 250.0
        });
        let a = amda_augment(&slice, &brain, 0, None, 20.0, 77).unwrap();
        let b = amda_augment(&slice, &brain, 0, None, 20.0, 77).unwrap();
        assert_eq!(a, b);
        let frac = a.applied_mask.count() as f64 / brain.count() as f64;
        assert!((frac - 0.2).abs() <= 0.02, "fraction {frac}");
    }

    proptest! {
        #[test]
        fn random_rectangle_hits_area_band(seed in any::<u64>(), alpha in 5.0f64..60.0,
                                           rr in 8.0f64..20.0, cr in 8.0f64..20.0) {
            let brain = Grid2::from_fn(48, 48, |r, c| {
                ((r as f64 - 24.0) / rr).powi(2) + ((c as f64 - 24.0) / cr).powi(2) <= 1.0
            });
            let m = random_brain_rectangle(&brain, alpha, seed).unwrap();
            let frac = m.count() as f64 / brain.count() as f64;
            prop_assert!((frac - alpha / 100.0).abs() <= 0.02, "alpha {alpha} got {frac}");
            prop_assert!(m.indexed().all(|(r, c, &v)| !v || brain[(r, c)]));
        }

        #[test]
        fn augmentation_only_touches_masked_brain(seed in any::<u64>(), label in 0u8..2, alpha in 0.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slice = Grid2::from_fn(12, 12, |_, _| rng.gen_range(-3.0f32..3.0));
            let brain = Grid2::from_fn(12, 12, |r, c| r > 1 && c > 2 && r < 11);
            let cam = Grid2::from_fn(12, 12, |_, _| rng.gen::<f64>());
            let a = amda_augment(&slice, &brain, label, Some(&cam), alpha, seed).unwrap();
            for (r, c, &m) in a.applied_mask.indexed() {
                if m {
                    prop_assert!(brain[(r, c)]);
                    prop_assert_eq!(a.pixels[(r, c)], 0.0);
                } else {
                    prop_assert_eq!(a.pixels[(r, c)], slice[(r, c)]);
                }
            }
        }
    }
}
