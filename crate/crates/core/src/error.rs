use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A grammar, generator, model or run configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called with arguments outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training or scoring produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A premise required by a theoretical construction does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
