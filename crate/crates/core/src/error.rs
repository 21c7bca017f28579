use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: loss is not attached to any differentiable input")]
    DetachedLoss,
    #[error("{what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("state tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    StateShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("state tensor `{name}` missing")]
    StateMissing { name: String },
    #[error("dataset: {0}")]
    Data(String),
}

pub type Result<T, E = CoreError> = core::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument {
        what,
        reason: reason.into(),
    }
}
