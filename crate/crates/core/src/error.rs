use std::path::PathBuf;

use lgn_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LgnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg} at byte offset {offset}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("linearity probe failed: residual {residual:e} exceeds {tolerance:e}")]
    NotLinear { residual: f64, tolerance: f64 },
    #[error("{what}: extent mismatch, expected {expected}, got {got}")]
    Extent {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = LgnError> = std::result::Result<T, E>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LgnError {
    let context = context.into();
    move |source| LgnError::Io { context, source }
}
