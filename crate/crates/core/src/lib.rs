//! Label-free tumor segmentation cascade.
//!
//! Slice-level pseudo-labels from embedding similarities drive class
//! activation maps, the maps become box and point prompts for a promptable
//! segmenter, and the resulting 3D pseudo-labels train a volumetric
//! segmenter over rounds of self-training with agreement-based filtering.
//!
//! All learned components sit behind [`backends::Backend`]. The crate ships a
//! deterministic analytic implementation plus a framed stdio protocol for
//! out-of-process adapters.
//!
//! ```text
//! input/ ─ labels ─ cam_q0 ─ amda ─ cam_q1 ─ sam ─ round1 ─ s3f_r2 ─ round2 ─ eval
//! ```

pub mod backends;
pub mod error;
pub mod fsutil;
pub mod grid;
pub mod labeling;
pub mod metrics;
pub mod orchestrator;
pub mod percentile;
pub mod prompting;
pub mod pseudo_label;
pub mod s3f;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Grid2, Grid3, Mask2D, Mask3D};
pub use volume::Volume;
