use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or hyperparameters that violate an operation's preconditions.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),
    /// Numerical inputs that cannot be processed (unnormalized distributions, NaN).
    #[error("computation error: {0}")]
    Computation(String),
    /// A check or optimizer step refused to proceed because of non-finite values.
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),
    /// Malformed serialized input.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
