use std::fmt;
use std::io;

/// Crate-wide error type. The variant names double as the message
/// categories the CLI prints before exiting.
#[derive(Debug)]
pub enum Error {
    /// Invalid tensor extents or element-count overflow.
    Size(String),
    /// Shape mismatch between operands.
    Shape(String),
    /// A value-level invariant was violated (non-binary spike, NaN, ...).
    Validation(String),
    /// Malformed file contents (bad magic, truncated payload, ...).
    Format(String),
    /// Invalid network configuration.
    Config(String),
    /// Missing or inconsistent weights.
    Weights(String),
    /// Underlying I/O failure.
    Io(io::Error),
    /// Invariant broken inside the engine itself; a bug, not bad input.
    Internal(String),
}

impl Error {
    /// Short category tag used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Size(_) | Error::Shape(_) => "shape",
            Error::Validation(_) | Error::Format(_) => "io",
            Error::Config(_) => "config",
            Error::Weights(_) => "weights",
            Error::Io(_) => "io",
            Error::Internal(_) => "internal",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Size(msg) => write!(f, "size error: {msg}"),
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Weights(msg) => write!(f, "weights error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
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

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
