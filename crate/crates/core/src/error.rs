use std::path::PathBuf;

/// Errors raised across the synthesis, evaluation and editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("raster format error in {path}: {message}")]
    Raster { path: PathBuf, message: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("label {id} at pixel (row {row}, col {col}) is outside [0, {classes})")]
    LabelOutOfRange {
        id: i64,
        row: usize,
        col: usize,
        classes: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch tiles: {tiles:?})")]
    NonFiniteLoss { step: u64, tiles: Vec<String> },

    #[error("metric undefined: {0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn raster(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Raster {
            path: path.into(),
            message: message.into(),
        }
    }
}
