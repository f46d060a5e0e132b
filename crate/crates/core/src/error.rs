use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or unusable input data or configuration.
    #[error("invalid input: {0}")]
    Input(String),
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A point or parameter lies outside the admissible domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric failure at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
