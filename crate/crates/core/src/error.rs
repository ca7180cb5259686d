use thiserror::Error;

use crate::backends::BackendError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mask has no region of interest")]
    NoRoi,

    #[error("training pool is empty")]
    EmptyPool,

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` requires `{missing}`, which is not available")]
    Dependency { stage: String, missing: String },

    #[error("stage `{stage}` failed ({context}): {source}")]
    Stage {
        stage: String,
        context: String,
        #[source]
        source: BackendError,
    },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("prediction/ground-truth ids differ: only in predictions {only_pred:?}, only in ground truth {only_gt:?}")]
    IdMismatch {
        only_pred: Vec<String>,
        only_gt: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
