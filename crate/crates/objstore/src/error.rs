use thiserror::Error;

pub type StoreResult<T> = Result<T, StoreError>;

#[derive(Debug, Error)]
pub enum StoreError {
    /// The object's length did not match the expected append offset.
    #[error("append offset mismatch: object length is {actual}")]
    OffsetMismatch { actual: u64 },

    #[error("object already has the maximum of {limit} parts")]
    PartLimitExceeded { limit: u32 },

    #[error("payload of {size} bytes exceeds the {max} byte part limit")]
    PayloadTooLarge { size: u64, max: u64 },

    #[error("backend does not support appending to existing objects")]
    AppendUnsupported,

    #[error("object not found: {0}")]
    NotFound(String),

    #[error("invalid range {start}..{end} for object of length {len}")]
    RangeInvalid { start: u64, end: u64, len: u64 },

    #[error("invalid object key: {0}")]
    InvalidKey(String),

    /// Transient failure; the request may be retried.
    #[error("backend unavailable: {0}")]
    Unavailable(String),

    /// Replicas disagree on an object's state and could not be reconciled.
    #[error("replica divergence on {key}: {detail}")]
    Divergence { key: String, detail: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("HTTP error: {0}")]
    Http(String),
}

impl StoreError {
    pub fn is_transient(&self) -> bool {
        matches!(self, StoreError::Unavailable(_) | StoreError::Http(_))
    }
}
