use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive produced NaN or infinity.
    #[error("numeric failure in `{op}`: non-finite value")]
    NonFinite { op: &'static str },

    /// Training loss became non-finite on a mini-batch.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gate mode error: {0}")]
    GateMode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group {0} has no samples")]
    EmptyGroup(usize),

    #[error("stratification infeasible: {0}")]
    Stratification(String),

    #[error("{path}: row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures that originate in floating-point arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }

    /// True for filesystem failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
