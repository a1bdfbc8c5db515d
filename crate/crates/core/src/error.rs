use std::io;

use thiserror::Error;

/// Errors produced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A file did not match the expected layout (bad magic, truncated payload, ...).
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Caller supplied an argument that violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("mesh has no surface area to sample from")]
    EmptySurface,
}

impl Error {
    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidInput(detail.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::format("json header", e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
