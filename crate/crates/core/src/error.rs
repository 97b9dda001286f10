use thiserror::Error;

/// Failures of tensor construction, graph operations and gradient checks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> NumericError {
    NumericError::Dimension(msg.into())
}
