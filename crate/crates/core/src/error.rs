use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic at byte offset {offset}: expected {expected:?}")]
    BadMagic { offset: u64, expected: &'static str },

    #[error("truncated file at byte offset {offset}: expected {expected} bytes, found {found}")]
    TruncatedFile {
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: u64 },

    #[error("non-finite value at byte offset {offset}")]
    NonFiniteValue { offset: u64 },

    #[error("i/o failure on {path:?}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("index {index} out of range for {count} vectors")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("infeasible synthetic spec: {0}")]
    SpecInfeasible(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-length vector at column {column}")]
    ZeroVector { column: usize },

    #[error("feature column {column} has zero norm before normalization")]
    ZeroFeature { column: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("batch size {batch} exceeds {pairs} available pairs")]
    BatchTooLarge { batch: usize, pairs: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical kind (log-det breakdown, degenerate features).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalFailure(_) | Error::ZeroFeature { .. } | Error::ZeroVector { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
