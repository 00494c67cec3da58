use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("loss must be a scalar, got tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error(transparent)]
    Pts(#[from] PtsError),

    #[error(transparent)]
    Pgm(#[from] PgmError),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Landmark (`.pts`) parse failures. Line numbers are 1-based.
#[derive(Debug, Error, PartialEq)]
pub enum PtsError {
    #[error("line {line}: expected header `{expected}`")]
    BadHeader { line: usize, expected: &'static str },
    #[error("line {line}: expected 68 points, file declares {found}")]
    WrongCount { line: usize, found: usize },
    #[error("line {line}: missing `{brace}`")]
    MissingBrace { line: usize, brace: char },
    #[error("line {line}: `{token}` is not a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: expected two coordinates")]
    BadPoint { line: usize },
    #[error("line {line}: trailing content after closing brace")]
    TrailingContent { line: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum PgmError {
    #[error("bad magic number, expected P5")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("maxval {0} exceeds 255")]
    MaxvalTooLarge(u32),
    #[error("truncated raster: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("not a model container (bad magic)")]
    BadMagic,
    #[error("checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("unsupported container version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}
