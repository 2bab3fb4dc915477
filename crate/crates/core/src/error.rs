use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation. The message names
    /// the operation and the offending shapes.
    Shape(String),
    /// Invalid argument or configuration value.
    Invalid(String),
    /// A malformed dataset line, with its 1-based line number.
    Data { line: usize, msg: String },
    /// I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
    /// Serialization / deserialization failure.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid input: {msg}"),
            Error::Data { line, msg } => write!(f, "data error at line {line}: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
