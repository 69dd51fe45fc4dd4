use std::fmt;

/// Library-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for an operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// Non-finite values where finite ones are required (losses, gradients).
    Numeric(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Components wired together disagree (tap counts, checkpoint shapes, ...).
    Wiring(String),
    /// An operation contract was violated by the caller (e.g. non-scalar loss).
    Contract(String),
    /// Invalid input data (e.g. token id out of vocabulary range).
    Input(String),
    /// Checkpoint file could not be read or parsed.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in `{op}`: {detail}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Wiring(msg) => write!(f, "wiring error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
