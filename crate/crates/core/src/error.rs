use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("crs mismatch: `{0}` vs `{1}`")]
    CrsMismatch(String, String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
