use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("weight at index {index} must be positive and finite, got {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("iteration budget must be at least 1")]
    ZeroBudget,

    #[error("{method} did not converge within {iterations} iterations")]
    NonConvergence { method: &'static str, iterations: usize },

    #[error("matrix is singular or not positive definite")]
    Singular,

    #[error("round has no corrupted weight; omniscient substitution is a no-op")]
    NoCorruptedWeight,
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
