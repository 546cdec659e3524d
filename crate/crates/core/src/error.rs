use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps these onto process exit codes via [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt ternary code 0b10 at element {index}")]
    CorruptCode { index: usize },

    #[error("accumulator bound exceeded: inner dimension {inner} > {limit}")]
    AccumulatorBound { inner: usize, limit: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: &'static str,
        expected: u16,
        found: u16,
    },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("query {0} has no ground-truth entry")]
    MissingGroundTruth(u64),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::Numeric(_) | Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
