use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WeakTrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WeakTrError {
    /// Operand shapes do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input outside an operation's documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A loss or function evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl WeakTrError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        WeakTrError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        WeakTrError::Domain(msg.into())
    }
}
