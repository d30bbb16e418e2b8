use thiserror::Error;

/// Errors surfaced by the estimation and inference routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The precision-surrogate program stayed infeasible after all slack doublings.
    #[error("degenerate design: surrogate row for coordinate {coord} infeasible (last mu = {mu})")]
    DegenerateDesign { coord: usize, mu: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, MlrError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MlrError::InvalidInput(msg.into()))
}
