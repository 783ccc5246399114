use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("checksum mismatch in record {record}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        record: usize,
        expected: u32,
        found: u32,
    },

    #[error("config digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::Corrupt(_) => "corrupt",
            Error::Checksum { .. } => "checksum",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Io { .. } => "io",
            Error::Png(_) => "png",
            Error::Config(_) => "config",
            Error::Invariant(_) => "invariant",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
