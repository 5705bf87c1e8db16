use thiserror::Error;

#[derive(Debug, Error)]
pub enum WdgError {
    /// Malformed or inconsistent caller input.
    #[error("invalid input: {0}")]
    Input(String),
    /// A shape or length disagreement between two operands.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An operation was called outside its documented preconditions.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A rank-one component collapsed to zero during an update.
    #[error("component degenerate: {0}")]
    Degenerate(String),
    /// MAPE has no nonzero truth cells to divide by.
    #[error("MAPE undefined: every evaluated truth value is zero")]
    MapeUndefined,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WdgError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(WdgError::Input(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(WdgError::Shape(msg.into()))
}
