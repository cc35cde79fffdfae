use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite activation in {location}")]
    NonFinite { location: String },

    #[error("non-finite gradient for {0}; step aborted")]
    NonFiniteGradient(String),

    #[error("target arity does not match regime {regime}: {detail}")]
    TargetArity { regime: &'static str, detail: String },

    #[error("inconsistent mask for {tensor}: {detail}")]
    Mask { tensor: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("loss became NaN at {stage} step {step}")]
    NanLoss { stage: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
