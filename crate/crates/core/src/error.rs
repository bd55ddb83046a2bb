use std::fmt;

/// Crate-wide error type. Numeric entry points reject bad shapes and
/// non-finite inputs instead of panicking; file formats reject anything
/// they cannot round-trip bit-exactly.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// An argument is outside its documented domain.
    Invalid { what: &'static str, detail: String },
    /// A non-finite value reached an entry point that requires finite input.
    NonFinite { op: &'static str },
    /// Config file rejected; line is 1-based.
    Config { line: usize, detail: String },
    /// A serialized artifact (checkpoint, key file, manifest) failed to decode.
    Decode { what: &'static str, detail: String },
    /// A key does not match what the model or checkpoint was bound to.
    KeyMismatch { detail: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Invalid { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value in {op}"),
            Error::Config { line, detail } => write!(f, "config line {line}: {detail}"),
            Error::Decode { what, detail } => write!(f, "cannot decode {what}: {detail}"),
            Error::KeyMismatch { detail } => write!(f, "key mismatch: {detail}"),
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

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { what, detail: detail.into() }
    }

    pub fn decode(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Decode { what, detail: detail.into() }
    }
}
