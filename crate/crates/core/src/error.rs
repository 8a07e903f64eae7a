use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Target puts mass on a label the calibration mixture never produces.
    #[error("unsupported label shift: target has mass on label {label} but calibration probability is zero")]
    UnsupportedShift { label: usize },

    #[error("degenerate weights for query label {label}: total likelihood-ratio mass is zero")]
    DegenerateWeights { label: usize },

    #[error("invalid privacy budget: delta = {delta} must lie in (0, {upper})")]
    InvalidBudget { delta: f64, upper: f64 },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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
