use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core estimation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("derivative order {order} exceeds the configured maximum {max}")]
    UnsupportedOrder { order: u32, max: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite covariance entry {value} at rows ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("covariance matrix is not positive definite after jitter ladder {ladder:?}")]
    Conditioning { ladder: Vec<f64> },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("every restart failed: {0}")]
    TrainingFailed(Box<Error>),

    #[error("identification failed: every grid point produced a non-finite loss")]
    IdentificationFailed,

    #[error("at grid index {index}: {source}")]
    AtGridPoint { index: usize, source: Box<Error> },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
