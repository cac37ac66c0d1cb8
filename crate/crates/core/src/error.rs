use std::path::PathBuf;

use gpmseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("unsupported layer `{layer}` in module `{module}`")]
    UnsupportedLayer { module: String, layer: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },
    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
}

impl From<TensorError> for GpmError {
    fn from(e: TensorError) -> Self {
        GpmError::InvalidInput(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GpmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> GpmError {
    GpmError::InvalidInput(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> GpmError {
    let path = path.into();
    move |source| GpmError::Io { path, source }
}
