//! Library-wide error type.
//!
//! Programmer errors (shape mismatches, out-of-range times, misuse of the
//! tape) panic with a message; `CoreError` covers conditions a caller can
//! plausibly hit at runtime and is expected to handle: bad checkpoints,
//! diverged numerics, malformed schedules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Numerical state stopped being finite (diverged training or solver).
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// A checkpoint file did not match the expected schema.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// A checkpoint was loaded into a network of a different architecture.
    #[error("architecture mismatch: checkpoint has {found}, wanted {wanted}")]
    ArchMismatch { found: String, wanted: String },

    /// A step schedule violated its ordering/endpoint contract.
    #[error("bad schedule: {0}")]
    BadSchedule(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn non_finite(context: impl Into<String>) -> Self {
        CoreError::NonFinite { context: context.into() }
    }
}
