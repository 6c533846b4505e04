//! Crate error type.

use alloc::string::String;
use alloc::vec::Vec;

/// Errors from the compute core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value was outside the mathematical domain of the operation.
    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    /// An argument failed validation.
    #[error("invalid argument for {op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    /// A non-finite value surfaced where a finite one is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A name lookup (layer, class, metric) failed.
    #[error("unknown {kind} {name:?}; valid names: {valid:?}")]
    UnknownName {
        kind: &'static str,
        name: String,
        valid: Vec<String>,
    },

    /// The compound-scaling constraint was violated.
    #[error("scaling constraint violated: alpha*beta^2*gamma^2 = {value}, expected within {tolerance} of 2")]
    ScalingConstraint { value: f64, tolerance: f64 },

    /// Dataset or manifest contents violated an invariant.
    #[error("invalid dataset: {message}")]
    InvalidDataset { message: String },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, message: impl Into<String>) -> Self {
        Error::Domain {
            op,
            message: message.into(),
        }
    }
}
