use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("step kind `{0}` is already registered")]
    DuplicateKind(String),
    #[error("step kind `{0}` is built in and cannot be re-registered")]
    ReservedKind(String),
    #[error("invalid schema for `{kind}`: {message}")]
    InvalidSchema { kind: String, message: String },
    #[error("unknown step kind `{0}`")]
    UnknownKind(String),
    #[error("invalid `{kind}` step: {message}")]
    Validation { kind: String, message: String },
    #[error("duplicate step id `{0}`")]
    DuplicateStepId(String),
    #[error("step index {index} out of range for tape of {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed tape document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
