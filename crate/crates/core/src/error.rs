use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum NekoError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("unknown character {0:?} (not in tokenizer alphabet)")]
    UnknownChar(char),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NekoError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> NekoError {
    NekoError::InvalidArgument(msg.into())
}
