use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by tensor ops, model building, data loading and the
/// attribution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has an invalid shape or content for the operation.
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// A binary dataset file does not follow the expected layout.
    #[error("{path}: malformed IDX data at byte {offset}: {reason}")]
    IdxFormat {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Paired dataset files disagree with each other.
    #[error("inconsistent dataset: {0}")]
    DatasetConsistency(String),

    /// A cached dataset file exists but fails its size check.
    #[error("{path}: cached file is {actual} bytes, expected {expected}; delete it and fetch again")]
    CacheIntegrity {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    /// A dataset file could not be retrieved from the mirror.
    #[error("failed to fetch {file} from {mirror}: {reason}")]
    Fetch {
        file: String,
        mirror: String,
        reason: String,
    },

    /// An API was called outside its documented protocol.
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
