use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the compression pipeline, the controller, the link
/// simulator and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite gradient value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("corrupt payload: index {index} out of range for dimension {dim}")]
    CorruptPayload { index: usize, dim: usize },

    #[error("invalid measurement: {0}")]
    Measurement(String),

    #[error("controller estimates not ready: no measurement recorded yet")]
    NotReady,

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
