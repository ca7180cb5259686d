//! Single-channel volumes, brain-area normalization and axial slicing.
//!
//! Axis 0 of `(depth, height, width)` is the axial axis. The brain is every
//! voxel whose original intensity is nonzero; background stays exactly zero
//! through normalization.

use crate::grid::{Grid2, Grid3, Mask2D, Mask3D};
use crate::{Error, Result};

pub const DEFAULT_SPACING: [f64; 3] = [1.0, 1.0, 1.0];

/// Standard deviations below this are treated as a constant brain.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub voxels: Grid3<f32>,
    /// `(dz, dy, dx)` in mm per voxel.
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(id: impl Into<String>, voxels: Grid3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let (d, h, w) = voxels.shape();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("volume shape {:?} has an empty axis", (d, h, w))));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            id: id.into(),
            voxels,
            spacing,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.shape()
    }
}

pub fn brain_mask(volume: &Volume) -> Mask3D {
    volume.voxels.map(|&v| v != 0.0)
}

/// Per-volume z-scoring of the brain area (population std).
pub fn normalize_brain(volume: &Volume) -> Volume {
    normalize_brain_with(volume, &brain_mask(volume))
}

/// Same as [`normalize_brain`] with an explicit, usually cached, brain mask.
pub fn normalize_brain_with(volume: &Volume, brain: &Mask3D) -> Volume {
    let values = volume.voxels.data();
    let mask = brain.data();
    let n = mask.iter().filter(|&&b| b).count();
    let mut out = Grid3::filled(volume.shape(), 0.0f32);
    if n > 0 {
        let mean = values
            .iter()
            .zip(mask)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / n as f64;
        let var = values
            .iter()
            .zip(mask)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std >= DEGENERATE_STD {
            for ((o, &v), &b) in out.data_mut().iter_mut().zip(values).zip(mask) {
                if b {
                    *o = ((v as f64 - mean) / std) as f32;
                }
            }
        }
    }
    Volume {
        id: volume.id.clone(),
        voxels: out,
        spacing: volume.spacing,
    }
}

pub fn extract_slices(volume: &Volume) -> Vec<Grid2<f32>> {
    volume.voxels.planes()
}

pub fn extract_mask_slices(mask: &Mask3D) -> Vec<Mask2D> {
    mask.planes()
}

/// Inverse of [`extract_slices`].
pub fn stack(
    id: impl Into<String>,
    slices: &[Grid2<f32>],
    spacing: [f64; 3],
) -> Result<Volume> {
    Volume::new(id, Grid3::from_planes(slices)?, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: (usize, usize, usize), data: Vec<f32>) -> Volume {
        Volume::new("v", Grid3::from_vec(shape, data).unwrap(), DEFAULT_SPACING).unwrap()
    }

    fn brain_stats(v: &Volume, brain: &Mask3D) -> (f64, f64) {
        let xs: Vec<f64> = v
            .voxels
            .data()
            .iter()
            .zip(brain.data())
            .filter(|(_, &b)| b)
            .map(|(&x, _)| x as f64)
            .collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    }

    #[test]
    fn brain_mask_trivial_cases() {
        assert!(!brain_mask(&vol((2, 2, 2), vec![0.0; 8])).any());
        assert_eq!(brain_mask(&vol((2, 2, 2), vec![1.0; 8])).count(), 8);
    }

    #[test]
    fn brain_mask_counts_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..4 * 5 * 6)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(0.5..2.0) } else { 0.0 })
            .collect();
        let k = data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(brain_mask(&vol((4, 5, 6), data)).count(), k);
    }

    #[test]
    fn uniform_brain_becomes_zero() {
        let mut data = vec![7.0f32; 27];
        data[0] = 0.0;
        let n = normalize_brain(&vol((3, 3, 3), data));
        assert!(n.voxels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_level_brain_maps_to_unit_values() {
        let n = normalize_brain(&vol((1, 2, 3), vec![1.0, 3.0, 0.0, 1.0, 3.0, 0.0]));
        assert_eq!(n.voxels.data(), &[-1.0, 1.0, 0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn extract_slices_matches_planes() {
        let v = vol((4, 3, 2), (0..24).map(|i| i as f32).collect());
        let slices = extract_slices(&v);
        assert_eq!(slices.len(), 4);
        for (d, s) in slices.iter().enumerate() {
            for r in 0..3 {
                for c in 0..2 {
                    assert_eq!(s[(r, c)], v.voxels[(d, r, c)]);
                }
            }
        }
        assert_eq!(stack("v", &slices, DEFAULT_SPACING).unwrap(), v);
    }

    #[test]
    fn rejects_bad_spacing() {
        let g = Grid3::filled((1, 1, 1), 1.0f32);
        assert!(Volume::new("x", g.clone(), [1.0, 0.0, 1.0]).is_err());
        assert!(Volume::new("x", g, [1.0, f64::NAN, 1.0]).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(d, h, w)| {
            proptest::collection::vec(
                prop_oneof![Just(0.0f32), -50.0f32..250.0],
                d * h * w,
            )
            .prop_map(move |data| vol((d, h, w), data))
        })
    }

    proptest! {
        #[test]
        fn normalized_brain_has_unit_stats(v in arb_volume()) {
            let brain = brain_mask(&v);
            prop_assume!(brain.count() >= 2);
            let (_, s0) = brain_stats(&v, &brain);
            prop_assume!(s0 > 1e-3);
            let n = normalize_brain(&v);
            let (m, s) = brain_stats(&n, &brain);
            prop_assert!(m.abs() < 1e-6, "mean {m}");
            prop_assert!((s - 1.0).abs() < 1e-6, "std {s}");
            for (x, b) in n.voxels.data().iter().zip(brain.data()) {
                if !b { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn normalization_is_idempotent(v in arb_volume()) {
            let brain = brain_mask(&v);
            prop_assume!(brain.count() >= 2);
            let (_, s0) = brain_stats(&v, &brain);
            prop_assume!(s0 > 1e-3);
            let once = normalize_brain_with(&v, &brain);
            let twice = normalize_brain_with(&once, &brain);
            for (a, b) in once.voxels.data().iter().zip(twice.voxels.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn slice_stack_round_trip(v in arb_volume()) {
            let back = stack(v.id.clone(), &extract_slices(&v), v.spacing).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
