//! Error types shared across the crate.

use thiserror::Error;

/// Errors for schedule construction, editing operations, and I/O.
#[derive(Debug, Error)]
pub enum PieError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("training diverged at step {step} (loss is not finite)")]
    TrainingDiverged { step: usize },

    #[error("undefined ratio: need at least 3 nonzero step differences")]
    UndefinedRatio,

    #[error("no fixed point: iteration contraction factor {rho} has modulus >= 1")]
    NoFixedPoint { rho: f64 },

    #[error("undefined similarity: mean-centered input is the zero vector")]
    UndefinedSimilarity,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PieError>;

impl PieError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PieError::InvalidArgument(msg.into())
    }
}
