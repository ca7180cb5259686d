//! Seeded synthetic corpus: an ellipsoidal "brain" of noisy tissue with one
//! or two brighter ellipsoidal tumors and their exact ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid::{Grid3, Mask3D};
use crate::tensor::Tensor;
use crate::volume::Volume;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    /// Edge length of the cubic grid.
    pub size: usize,
    pub seed: u64,
    pub spacing: [f64; 3],
    pub tissue_mean: f64,
    pub tumor_contrast: f64,
    pub noise_sd: f64,
    /// Tumor semi-axes are drawn uniformly from this range (voxels).
    pub tumor_radius: (f64, f64),
    /// Width of the partial-volume ramp at tumor borders (voxels).
    pub edge_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 40,
            size: 64,
            seed: 0,
            spacing: [1.0, 1.0, 1.0],
            tissue_mean: 100.0,
            tumor_contrast: 60.0,
            noise_sd: 1.0,
            tumor_radius: (3.0, 9.0),
            edge_width: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub volume: Volume,
    pub gt: Mask3D,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Scaled radial coordinate: 1 on the surface.
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / 3.0
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Draws the corpus; case `i` depends only on `(seed, i)`.
pub fn generate(config: &SynthConfig) -> Vec<SynthCase> {
    (0..config.count).map(|i| generate_case(config, i)).collect()
}

pub fn generate_case(config: &SynthConfig, index: usize) -> SynthCase {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let n = config.size as f64;
    let half = (n - 1.0) / 2.0;
    let brain = Ellipsoid {
        center: [0; 3].map(|_| half + rng.gen_range(-1.0..=1.0)),
        radii: [0; 3].map(|_| n * rng.gen_range(0.38..=0.44)),
    };
    let n_tumors = rng.gen_range(1..=2);
    let tumors: Vec<Ellipsoid> = (0..n_tumors)
        .map(|_| {
            let radii = [0; 3].map(|_| rng.gen_range(config.tumor_radius.0..=config.tumor_radius.1));
            let rmax = radii.iter().cloned().fold(0.0, f64::max);
            // keep the tumor, plus a margin, inside the brain
            let room = brain.radii.map(|r| (r - rmax - 3.0).max(0.0));
            let center = loop {
                let u = [0; 3].map(|_| rng.gen_range(-1.0..=1.0));
                if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    break [0, 1, 2].map(|k| brain.center[k] + u[k] * room[k]);
                }
            };
            Ellipsoid { center, radii }
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sd).expect("finite noise sd");
    let shape = (config.size, config.size, config.size);
    let mut gt = Grid3::filled(shape, false);
    let mut vox = Grid3::filled(shape, 0.0f32);
    for d in 0..config.size {
        for r in 0..config.size {
            for c in 0..config.size {
                let p = [d as f64, r as f64, c as f64];
                if brain.rho(p) > 1.0 {
                    continue;
                }
                let mut fraction: f64 = 0.0;
                let mut inside = false;
                for t in &tumors {
                    let rho = t.rho(p);
                    inside |= rho <= 1.0;
                    let signed = (1.0 - rho) * t.mean_radius();
                    fraction = fraction.max((signed / config.edge_width.max(1e-9) + 0.5).clamp(0.0, 1.0));
                }
                gt[(d, r, c)] = inside;
                let v = config.tissue_mean + config.tumor_contrast * fraction + noise.sample(&mut rng);
                // zero marks background, so tissue never takes that value
                vox[(d, r, c)] = (v as f32).max(f32::MIN_POSITIVE);
            }
        }
    }
    let volume = Volume::new(case_id(index), vox, config.spacing).expect("valid synthetic volume");
    SynthCase { volume, gt }
}

/// Writes `input/{id}.tns` and `gt/{id}.tns` under `root`.
pub fn write_corpus(root: &Path, cases: &[SynthCase]) -> Result<()> {
    for case in cases {
        let id = &case.volume.id;
        Tensor::from_volume(&case.volume).save(&root.join("input").join(format!("{id}.tns")))?;
        Tensor::from_mask3(&case.gt)
            .with_id(id.clone())
            .with_spacing(case.volume.spacing)
            .save(&root.join("gt").join(format!("{id}.tns")))?;
    }
    Ok(())
}
