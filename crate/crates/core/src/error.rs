use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("no embedding for id {0} in embedding file")]
    MissingEmbedding(u64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("token count mismatch for id {id}: text has {expected} tokens, embedding has {actual}")]
    TokenCountMismatch { id: u64, expected: usize, actual: usize },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("non-finite value {value} at {context}")]
    NonFinite { value: f64, context: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient points: k={k} but only {available} points")]
    InsufficientPoints { k: usize, available: usize },

    #[error("negative pool too small: requested {requested}, available {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("candidate mismatch between distributions")]
    CandidateMismatch,

    #[error("unknown passage id {0}")]
    UnknownPassage(u64),

    #[error("unknown query id {0}")]
    UnknownQuery(u64),

    #[error("degenerate projection: row {row} of id {id} projects to the zero vector")]
    DegenerateProjection { id: u64, row: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { value, context })
    }
}
