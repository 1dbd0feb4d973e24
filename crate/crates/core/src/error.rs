use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum MieError {
    /// Bad input shape, out-of-range argument or malformed configuration.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric routine failed (non-convergence, non-finite values).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary file could not be decoded.
    #[error("format error in {block}: {reason}")]
    Format { block: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl MieError {
    pub fn validation(msg: impl Into<String>) -> Self {
        MieError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        MieError::Numeric(msg.into())
    }

    pub fn format(block: impl Into<String>, reason: impl Into<String>) -> Self {
        MieError::Format {
            block: block.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        MieError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 for validation problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            MieError::Validation(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MieError>;
