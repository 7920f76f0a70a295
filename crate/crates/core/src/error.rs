//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by measure, generator, solver and study operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Input failed validation (bad shapes, out-of-range parameters, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A test function or operator was applied to an incompatible measure representation.
    #[error("representation mismatch: {0}")]
    Representation(String),

    /// A step size was too large for the scheme to stay positive or stable.
    #[error("step size too large: {0}")]
    StepSize(String),

    /// An iteration did not reach its tolerance; carries the residual history.
    #[error("no convergence after {iterations} iterations (last residual {last:.3e})")]
    NonConvergence {
        iterations: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    /// A Picard/fixed-point map stopped contracting.
    #[error("contraction failure: {message}")]
    Contraction { message: String, residuals: Vec<f64> },

    /// A required derivative or callback was not supplied.
    #[error("missing derivative: {0}")]
    MissingDerivative(String),

    /// The requested operation is not supported for this problem class.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
