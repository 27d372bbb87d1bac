use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category. The CLI maps each one onto a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Argument,
    Validation,
    Numerical,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Argument => 2,
            ErrorKind::Validation => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Argument => "argument",
            ErrorKind::Validation => "validation",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),

    #[error("truncated tensor: expected {expected} payload bytes, found {found}")]
    TruncatedTensor { expected: usize, found: usize },

    #[error("truncated model file")]
    TruncatedModel,

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Argument,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::UnrecognizedFormat(_)
            | Error::TruncatedTensor { .. }
            | Error::TruncatedModel
            | Error::Checksum { .. }
            | Error::NonFinite(_)
            | Error::DimensionMismatch { .. }
            | Error::Invalid(_)
            | Error::Json(_) => ErrorKind::Validation,
        }
    }
}
