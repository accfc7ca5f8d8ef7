//! Error type shared across the crate.

use thiserror::Error;

use crate::em::EmTrace;

#[derive(Debug, Error)]
pub enum CapaError {
    /// Shape or size mismatch between inputs.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar or vector parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Incompatible combination of model kind, neighbourhood spec or data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A matrix required to be invertible is numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// Non-finite values or a numerically failed operation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// EM objective decreased beyond slack for several consecutive iterations.
    #[error("EM divergence: {reason}")]
    Divergence {
        reason: String,
        trace: Box<EmTrace>,
    },
}

pub type Result<T> = std::result::Result<T, CapaError>;
