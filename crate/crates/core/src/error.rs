use std::fmt;

/// Errors surfaced by the public API.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not satisfy the operation's contract.
    ShapeMismatch(String),
    /// An argument violated a precondition.
    InvalidArgument(String),
    /// A computation produced a non-finite value where finiteness is required.
    NonFinite(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A serialized artifact (checkpoint, dataset file, image) is malformed.
    Format(String),
    /// A configuration file or override was rejected.
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
