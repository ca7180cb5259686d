//! The boundary to every learned component.
//!
//! Stages talk to an embedder, a classifier that exposes per-layer gradient
//! maps, a promptable 2D segmenter and a trainable 3D segmenter only through
//! [`Backend`]. Model state is an opaque [`ModelBlob`] that the engine
//! persists and hands back; gradients cross the boundary so the activation
//! map arithmetic stays in the engine.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid2, Mask2D, Mask3D};
use crate::prompting::PromptSet;
use crate::volume::Volume;

pub mod analytic;
pub mod conformance;
pub mod external;
pub mod protocol;

pub use analytic::{AnalyticBackend, AnalyticConfig};
pub use external::ExternalBackend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnsupportedCapability,
    State,
    InvalidRequest,
    Protocol,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::UnsupportedCapability => "unsupported_capability",
            ErrorCode::State => "state",
            ErrorCode::InvalidRequest => "invalid_request",
            ErrorCode::Protocol => "protocol",
            ErrorCode::Internal => "internal",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct BackendError {
    pub code: ErrorCode,
    pub message: String,
}

impl BackendError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidRequest, message)
    }

    pub fn state(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::State, message)
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Protocol, message)
    }

    pub fn unsupported(cap: Capability) -> Self {
        Self::new(
            ErrorCode::UnsupportedCapability,
            format!("backend does not offer `{}`", cap.as_str()),
        )
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    EmbedImage,
    EmbedText,
    TrainClassifier,
    GradientMaps,
    /// The classifier may also return a finished activation map.
    PrecomputedCam,
    SegmentPrompted,
    TrainSegmenter,
    PredictVolume,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::EmbedImage => "embed_image",
            Capability::EmbedText => "embed_text",
            Capability::TrainClassifier => "train_classifier",
            Capability::GradientMaps => "gradient_maps",
            Capability::PrecomputedCam => "precomputed_cam",
            Capability::SegmentPrompted => "segment_prompted",
            Capability::TrainSegmenter => "train_segmenter",
            Capability::PredictVolume => "predict_volume",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Analytic,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub capabilities: BTreeSet<Capability>,
    pub layer_ids: Vec<String>,
}

impl BackendDescriptor {
    pub fn supports(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn require(&self, cap: Capability) -> BackendResult<()> {
        if self.supports(cap) {
            Ok(())
        } else {
            Err(BackendError::unsupported(cap))
        }
    }
}

/// Serialized model state owned by the engine between calls.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelBlob(pub Vec<u8>);

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Grid2<f32>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterSample {
    pub volume: Volume,
    pub label: Mask3D,
}

/// Per-channel gradient grids for one layer, optionally with the layer's
/// activations for the elementwise-weighted map variant.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub id: String,
    pub gradients: Vec<Grid2<f32>>,
    pub activations: Option<Vec<Grid2<f32>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub probability: f64,
    pub layers: Vec<LayerMaps>,
    pub cam: Option<Grid2<f32>>,
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn embed_image(&self, image: &Grid2<f32>) -> BackendResult<Vec<f64>>;

    fn embed_text(&self, text: &str) -> BackendResult<Vec<f64>>;

    fn train_classifier(&self, samples: &[LabeledImage]) -> BackendResult<ModelBlob>;

    fn classify_with_maps(&self, model: &ModelBlob, image: &Grid2<f32>)
        -> BackendResult<ClassifierOutput>;

    /// Exactly one mask per prompt set.
    fn segment_prompted(&self, image: &Grid2<f32>, prompts: &PromptSet) -> BackendResult<Mask2D>;

    fn train_segmenter(&self, pool: &[SegmenterSample]) -> BackendResult<ModelBlob>;

    fn predict_volume(&self, model: &ModelBlob, volume: &Volume) -> BackendResult<Mask3D>;
}
