use thiserror::Error;

/// Errors raised by the pricing and hedging engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A model or experiment parameter lies outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// The requested operation is not defined for this model variant or input.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// The requested computation exceeds a configured size budget.
    #[error("resource budget exceeded: {what} (requested {requested}, limit {limit})")]
    Resource {
        what: String,
        requested: u128,
        limit: u128,
    },

    /// Two inputs that must be aligned are not.
    #[error("length mismatch: {0}")]
    Mismatch(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
