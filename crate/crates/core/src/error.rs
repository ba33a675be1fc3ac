use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} ({left:?} vs {right:?})")]
    DimensionMismatch {
        what: &'static str,
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
