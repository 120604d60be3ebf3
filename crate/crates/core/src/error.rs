use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core and the pipeline stages built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("{op}: shape mismatch on axes {axes:?}: {detail}")]
    Shape {
        op: &'static str,
        axes: Vec<usize>,
        detail: String,
    },
    /// A hyperparameter or configuration value violates its constraint.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An operation produced NaN or infinity.
    #[error("{0}: non-finite value produced")]
    NonFinite(&'static str),
    /// The object is not in a usable state (e.g. an empty forest).
    #[error("invalid state: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, axes: &[usize], detail: String) -> Error {
    Error::Shape {
        op,
        axes: axes.to_vec(),
        detail,
    }
}
