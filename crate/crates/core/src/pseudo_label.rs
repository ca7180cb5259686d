//! Slice-by-slice promptable segmentation stacked into 3D pseudo-labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendResult};
use crate::grid::{Grid2, Grid3, Mask2D, Mask3D};
use crate::labeling::threshold_mask;
use crate::prompting::{build_prompts_padded, extract_roi, fallback_prompts};
use crate::{Error, Result};

/// Which pass produced a pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    CamSam,
    SelfTrainRound1,
    SamReseg,
}

/// Why a plane of a pseudo-label looks the way it does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceOrigin {
    /// Negative slice; the plane is zero.
    EmptyByLabel,
    /// Segmented from prompts built on the slice's ROI.
    Segmented,
    /// Segmented from the fixed-size box around the CAM argmax.
    FallbackPrompt,
    /// Positive slice that ended up with an empty plane.
    FallbackEmpty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub mask: Mask3D,
    pub source: PseudoSource,
    pub per_slice_origin: Vec<SliceOrigin>,
}

/// Segmenter output for one positive slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMask {
    pub mask: Mask2D,
    pub origin: SliceOrigin,
}

impl SliceMask {
    /// Tags a mask produced from ROI prompts; an empty one is recorded as such.
    pub fn segmented(mask: Mask2D) -> Self {
        let origin = if mask.any() {
            SliceOrigin::Segmented
        } else {
            SliceOrigin::FallbackEmpty
        };
        Self { mask, origin }
    }

    pub fn fallback(mask: Mask2D) -> Self {
        let origin = if mask.any() {
            SliceOrigin::FallbackPrompt
        } else {
            SliceOrigin::FallbackEmpty
        };
        Self { mask, origin }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            mask: Mask2D::filled(rows, cols, false),
            origin: SliceOrigin::FallbackEmpty,
        }
    }
}

/// Stacks per-slice results: zero planes for label-0 slices, the supplied
/// masks (one per label-1 slice, in slice order) for the rest.
pub fn assemble(
    shape: (usize, usize, usize),
    slice_labels: &[u8],
    positives: Vec<SliceMask>,
    source: PseudoSource,
) -> Result<PseudoLabel> {
    let (depth, rows, cols) = shape;
    if slice_labels.len() != depth {
        return Err(Error::Shape(format!(
            "{} slice labels for depth {depth}",
            slice_labels.len()
        )));
    }
    let n_pos = slice_labels.iter().filter(|&&l| l == 1).count();
    if positives.len() != n_pos {
        return Err(Error::Shape(format!(
            "{} masks for {n_pos} positive slices",
            positives.len()
        )));
    }
    let mut mask = Grid3::filled(shape, false);
    let mut origins = Vec::with_capacity(depth);
    let mut it = positives.into_iter();
    for (d, &label) in slice_labels.iter().enumerate() {
        match label {
            0 => origins.push(SliceOrigin::EmptyByLabel),
            1 => {
                let s = it.next().expect("counted above");
                if s.mask.shape() != (rows, cols) {
                    return Err(Error::Shape(format!(
                        "slice {d} mask {:?} vs plane {:?}",
                        s.mask.shape(),
                        (rows, cols)
                    )));
                }
                mask.set_plane(d, &s.mask)?;
                origins.push(if s.mask.any() {
                    s.origin
                } else {
                    SliceOrigin::FallbackEmpty
                });
            }
            other => return Err(Error::Contract(format!("slice label {other} is not binary"))),
        }
    }
    Ok(PseudoLabel {
        mask,
        source,
        per_slice_origin: origins,
    })
}

/// Prompting knobs shared by the CAM pass and the re-segmentation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptOptions {
    pub padding: usize,
    pub fallback_box: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            padding: 0,
            fallback_box: 9,
        }
    }
}

/// One positive slice through the CAM route: top-`alpha`% CAM region, its
/// largest component as ROI, prompts, segmenter. An empty ROI falls back to
/// the box around the CAM argmax; a slice without brain stays empty.
pub fn segment_from_cam(
    backend: &dyn Backend,
    image: &Grid2<f32>,
    cam: &Grid2<f64>,
    brain: &Mask2D,
    alpha: f64,
    opts: PromptOptions,
) -> Result<SliceMask> {
    let (rows, cols) = image.shape();
    let roi = extract_roi(&threshold_mask(cam, alpha, brain)?);
    if roi.any() {
        let prompts = build_prompts_padded(&roi, opts.padding)?;
        return Ok(SliceMask::segmented(backend.segment_prompted(image, &prompts)?));
    }
    if !brain.any() {
        return Ok(SliceMask::empty(rows, cols));
    }
    let prompts = fallback_prompts(cam, brain, opts.fallback_box);
    Ok(SliceMask::fallback(backend.segment_prompted(image, &prompts)?))
}

/// Re-prompts the segmenter from a 3D prediction: every slice with a
/// nonempty predicted plane gets ROI prompts and one segmenter call. Slices
/// are dispatched in parallel; failures report the first failing slice.
pub fn resegment_via_prompts(
    backend: &dyn Backend,
    slices: &[Grid2<f32>],
    prediction: &Mask3D,
    opts: PromptOptions,
) -> Result<PseudoLabel> {
    let (depth, rows, cols) = prediction.shape();
    if slices.len() != depth || slices.iter().any(|s| s.shape() != (rows, cols)) {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match {} slices",
            prediction.shape(),
            slices.len()
        )));
    }
    let planes = prediction.planes();
    let labels: Vec<u8> = planes.iter().map(|p| p.any() as u8).collect();
    let results: Vec<(usize, BackendResult<Mask2D>)> = planes
        .par_iter()
        .enumerate()
        .filter(|(_, p)| p.any())
        .map(|(d, p)| {
            let roi = extract_roi(p);
            let prompts = build_prompts_padded(&roi, opts.padding).expect("plane is nonempty");
            (d, backend.segment_prompted(&slices[d], &prompts))
        })
        .collect();
    let mut positives = Vec::with_capacity(results.len());
    for (d, r) in results {
        match r {
            Ok(m) => positives.push(SliceMask::segmented(m)),
            Err(source) => {
                return Err(Error::Stage {
                    stage: "resegment".into(),
                    context: format!("slice {d}"),
                    source,
                })
            }
        }
    }
    assemble(prediction.shape(), &labels, positives, PseudoSource::SamReseg)
}
