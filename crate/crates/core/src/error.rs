//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input file exists but its contents violate the expected format.
    #[error("malformed input: {0}")]
    MalformedInput(String),

    /// A stored artifact does not match its recorded checksum.
    #[error("checksum mismatch for {path}: expected {expected}, found {actual}")]
    ChecksumMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    /// Training produced a non-finite loss; carries the diagnostic dump.
    #[error("non-finite loss at step {step} (batch {batch_index}): {breakdown_json}")]
    NonFiniteLoss {
        step: u64,
        batch_index: usize,
        breakdown_json: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedInput(msg.into())
    }
}
