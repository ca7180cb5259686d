//! Box and point prompts for the promptable segmenter.
//!
//! A prompt set is the tight box around the dominant region plus one
//! foreground point near the box center and one background point on each
//! box corner.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::grid::{Grid2, Mask2D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Fg,
    Bg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub rc: [usize; 2],
    pub label: PointLabel,
}

/// Wire form: `{"box":[r0,c0,r1,c1],"points":[{"rc":[r,c],"label":"fg"|"bg"},..]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    /// Inclusive `[row_min, col_min, row_max, col_max]`.
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    pub points: Vec<PromptPoint>,
}

impl PromptSet {
    fn from_box(bbox: [usize; 4], fg: (usize, usize)) -> Self {
        let [r0, c0, r1, c1] = bbox;
        let mut points = vec![PromptPoint {
            rc: [fg.0, fg.1],
            label: PointLabel::Fg,
        }];
        for rc in [[r0, c0], [r0, c1], [r1, c0], [r1, c1]] {
            points.push(PromptPoint {
                rc,
                label: PointLabel::Bg,
            });
        }
        Self { bbox, points }
    }

    pub fn foreground(&self) -> Option<(usize, usize)> {
        self.points
            .iter()
            .find(|p| p.label == PointLabel::Fg)
            .map(|p| (p.rc[0], p.rc[1]))
    }

    pub fn background(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points
            .iter()
            .filter(|p| p.label == PointLabel::Bg)
            .map(|p| (p.rc[0], p.rc[1]))
    }

    pub fn contains(&self, (r, c): (usize, usize)) -> bool {
        let [r0, c0, r1, c1] = self.bbox;
        (r0..=r1).contains(&r) && (c0..=c1).contains(&c)
    }

    /// Checks the structural invariants against an image of `shape`.
    pub fn validate(&self, (rows, cols): (usize, usize)) -> Result<()> {
        let [r0, c0, r1, c1] = self.bbox;
        if r0 > r1 || c0 > c1 || r1 >= rows || c1 >= cols {
            return Err(Error::Contract(format!(
                "box {:?} invalid for a {rows}x{cols} image",
                self.bbox
            )));
        }
        let fg: Vec<_> = self
            .points
            .iter()
            .filter(|p| p.label == PointLabel::Fg)
            .collect();
        let bg: Vec<_> = self.background().collect();
        if fg.len() != 1 || bg.len() != 4 {
            return Err(Error::Contract(format!(
                "expected 1 fg and 4 bg points, got {} and {}",
                fg.len(),
                bg.len()
            )));
        }
        let (fr, fc) = (fg[0].rc[0], fg[0].rc[1]);
        if fr >= rows || fc >= cols {
            return Err(Error::Contract(format!(
                "fg point ({fr},{fc}) outside the image"
            )));
        }
        if !self.contains((fr, fc)) {
            return Err(Error::Contract(format!("fg point ({fr},{fc}) outside the box")));
        }
        for (r, c) in bg {
            if !((r == r0 || r == r1) && (c == c0 || c == c1)) {
                return Err(Error::Contract(format!(
                    "bg point ({r},{c}) is not a box corner"
                )));
            }
        }
        Ok(())
    }
}

/// Largest 4-connected component; ties go to the component whose first
/// pixel comes first in row-major order.
pub fn extract_roi(mask: &Mask2D) -> Mask2D {
    let (h, w) = mask.shape();
    let mut label = Grid2::filled(h, w, 0u32);
    let mut best: Option<(usize, u32)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[(r, c)] || label[(r, c)] != 0 {
                continue;
            }
            next += 1;
            label[(r, c)] = next;
            queue.push_back((r, c));
            let mut size = 0usize;
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                let neighbours = [
                    (pr.wrapping_sub(1), pc),
                    (pr + 1, pc),
                    (pr, pc.wrapping_sub(1)),
                    (pr, pc + 1),
                ];
                for (nr, nc) in neighbours {
                    if nr < h && nc < w && mask[(nr, nc)] && label[(nr, nc)] == 0 {
                        label[(nr, nc)] = next;
                        queue.push_back((nr, nc));
                    }
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, next));
            }
        }
    }
    match best {
        None => Mask2D::filled(h, w, false),
        Some((_, keep)) => label.map(|&l| l == keep),
    }
}

/// Prompt set from a nonempty ROI with no box padding.
pub fn build_prompts(roi: &Mask2D) -> Result<PromptSet> {
    build_prompts_padded(roi, 0)
}

/// Box grown by `padding` pixels on each side, clipped to the image.
pub fn build_prompts_padded(roi: &Mask2D, padding: usize) -> Result<PromptSet> {
    let (r0, c0, r1, c1) = roi.bounding_box().ok_or(Error::NoRoi)?;
    let center = ((r0 + r1) / 2, (c0 + c1) / 2);
    let fg = if roi[center] {
        center
    } else {
        nearest_set_pixel(roi, center).expect("roi is nonempty")
    };
    let (h, w) = roi.shape();
    let bbox = [
        r0.saturating_sub(padding),
        c0.saturating_sub(padding),
        (r1 + padding).min(h - 1),
        (c1 + padding).min(w - 1),
    ];
    Ok(PromptSet::from_box(bbox, fg))
}

/// Closest set pixel by Euclidean distance, first in row-major order on ties.
fn nearest_set_pixel(mask: &Mask2D, (cr, cc): (usize, usize)) -> Option<(usize, usize)> {
    let mut best: Option<(usize, (usize, usize))> = None;
    for (r, c, &v) in mask.indexed() {
        if !v {
            continue;
        }
        let d2 = r.abs_diff(cr).pow(2) + c.abs_diff(cc).pow(2);
        if best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, (r, c)));
        }
    }
    best.map(|(_, p)| p)
}

/// Fixed-size box around the CAM argmax, used when a positive slice's
/// thresholded CAM is empty. The argmax is taken over brain pixels when the
/// slice has any.
pub fn fallback_prompts(cam: &Grid2<f64>, brain: &Mask2D, size: usize) -> PromptSet {
    let use_brain = brain.any();
    let mut best: Option<(f64, (usize, usize))> = None;
    for (r, c, &v) in cam.indexed() {
        if use_brain && !brain[(r, c)] {
            continue;
        }
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, (r, c)));
        }
    }
    let (_, (r, c)) = best.unwrap_or((0.0, (0, 0)));
    let half = size.max(1) / 2;
    let (h, w) = cam.shape();
    let far = size.max(1) - 1 - half;
    let bbox = [
        r.saturating_sub(half),
        c.saturating_sub(half),
        (r + far).min(h - 1),
        (c + far).min(w - 1),
    ];
    PromptSet::from_box(bbox, (r, c))
}
