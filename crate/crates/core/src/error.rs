use std::path::PathBuf;

use thiserror::Error;

use crate::rerank::RankedEvidence;

pub type Result<T, E = KgiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KgiError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed for field `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("document `{doc_id}` has neither title nor body and cannot be chunked")]
    Unchunkable { doc_id: String },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),

    #[error("passage `{0}` not found")]
    PassageNotFound(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("generation failed: {message}")]
    GenerationFailed {
        message: String,
        /// Evidence retrieved before generation failed, so callers can still show it.
        evidence: Vec<RankedEvidence>,
        #[source]
        source: Option<Box<KgiError>>,
    },

    #[error("prediction/gold id mismatch: missing {missing:?}, extra {extra:?}")]
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("corrupt index file: {0}")]
    CorruptIndex(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KgiError {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        KgiError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_transport(&self) -> bool {
        match self {
            KgiError::Transport { .. } => true,
            KgiError::GenerationFailed { source: Some(s), .. } => s.is_transport(),
            _ => false,
        }
    }
}
