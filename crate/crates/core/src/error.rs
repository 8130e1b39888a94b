use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path:?}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("input too short: got {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest entry {id}: {reason}")]
    Entry { id: String, reason: String },

    #[error("corrupt archive {path:?}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported archive version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("chunk of {chunk_ms} ms is below the model's ideal latency of {min_ms} ms")]
    ChunkTooSmall { chunk_ms: f64, min_ms: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
