use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("variance {value:e} at index {index} is below the floor {floor:e}")]
    VarianceBelowFloor {
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("zero-norm vector passed to {0}")]
    ZeroNorm(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("backward pass called without a matching forward trace")]
    MissingCache,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0} is out of range")]
    OutOfRange(String),

    #[error("class {class} has no samples in split `{split}`")]
    MissingClass { class: usize, split: String },

    #[error("class imbalance: {0}")]
    ClassImbalance(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse error classes, used for process exit codes and the C ABI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::OutOfRange(_) => ErrorClass::Usage,
            Error::NonFinite(_)
            | Error::VarianceBelowFloor { .. }
            | Error::ZeroNorm(_)
            | Error::Diverged { .. }
            | Error::MissingCache => ErrorClass::Numeric,
            Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::MissingClass { .. }
            | Error::ClassImbalance(_)
            | Error::Format { .. }
            | Error::SizeMismatch { .. }
            | Error::Invariant(_)
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Csv(_) => ErrorClass::Data,
        }
    }

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
