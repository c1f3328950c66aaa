use std::path::PathBuf;

use rfssl_numerics::NumericsError;
use thiserror::Error;

use crate::datastore::npy::NpyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Npy(#[from] NpyError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite loss at step {step} (lr {lr:.6e}, tau {tau:.4}, m {momentum:.6})")]
    Diverged {
        step: usize,
        lr: f64,
        tau: f64,
        momentum: f64,
    },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("interrupted at step {step}")]
    Interrupted { step: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 for configuration and I/O
    /// problems, 3 for numeric failures, 4 for mismatched artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::Numerics(NumericsError::NonFinite(_)) => 3,
            Error::Mismatch(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}
