use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record contains no samples")]
    EmptyRecord,

    #[error("binary signal length {0} bytes is not a multiple of 4")]
    MalformedBinary(usize),

    #[error("line {line}: cannot parse {token:?}")]
    Parse { line: usize, token: String },

    #[error("line {line}: non-finite sample value")]
    NonFinite { line: usize },

    #[error("line {line}: negative annotation index {value}")]
    NegativeIndex { line: usize, value: i64 },

    #[error("annotation index {index} outside record of length {len}")]
    AnnotationOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model depth {0} outside supported range 2..=64")]
    DepthOutOfRange(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model file does not start with the expected magic bytes")]
    BadMagic,

    #[error("model file truncated")]
    Truncated,

    #[error("backward pass requires activations cached by a training forward pass")]
    MissingCache,

    #[error("{0} subjects cannot be split into {1} folds")]
    NotEnoughSubjects(usize, usize),

    #[error("segments do not tile the record: {0}")]
    TilingViolation(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
