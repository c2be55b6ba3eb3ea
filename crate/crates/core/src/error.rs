use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed file content. `location` names the file and, for text
    /// formats, the 1-based line.
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
