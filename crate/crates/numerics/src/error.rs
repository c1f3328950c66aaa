use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NumericsError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        NumericsError::InvalidShape { op, msg: msg.into() }
    }
}
