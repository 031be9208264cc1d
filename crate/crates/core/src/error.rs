use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Frame;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid face box: width {width} and height {height} must be positive and finite")]
    InvalidBox { width: f64, height: f64 },

    #[error("expected a shape in the {expected:?} frame, got {found:?}")]
    WrongFrame { expected: Frame, found: Frame },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid index: {0}")]
    InvalidIndex(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate ground truth: {0}")]
    DegenerateGroundTruth(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
