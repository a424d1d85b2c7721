//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, solvers, and estimators.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Problem name not in the built-in catalog.
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    /// A parameter failed validation (wrong sign, wrong range, unknown key).
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// A step-size condition required by the requested routine does not hold.
    /// Carries the rendered report so callers can show which condition failed.
    #[error("step-size precondition failed:\n{report}")]
    Precondition { report: String },

    /// The implicit solve did not reach the residual tolerance.
    #[error("implicit solve did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: u64, residual: f64 },

    /// A non-finite value was passed in or produced where finiteness is required.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// Mismatched dimensions between problem, state, or noise objects.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// An estimator was asked for a regime it does not support
    /// (for example a closed-form reference on a nonlinear problem).
    #[error("unsupported request: {0}")]
    Unsupported(String),

    /// Not enough usable data points for a fit.
    #[error("insufficient data for {context}: need at least {needed}, got {got}")]
    InsufficientData {
        context: String,
        needed: usize,
        got: usize,
    },
}

impl Error {
    pub fn invalid_parameter(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
