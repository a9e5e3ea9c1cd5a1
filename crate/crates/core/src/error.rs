use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum RiseError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dim { expected: usize, actual: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {key}: {message}")]
    Format {
        line: usize,
        key: String,
        message: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, RiseError>;

impl RiseError {
    pub(crate) fn dim(expected: usize, actual: usize) -> Self {
        RiseError::Dim { expected, actual }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RiseError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(line: usize, key: impl Into<String>, message: impl Into<String>) -> Self {
        RiseError::Format {
            line,
            key: key.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(RiseError::dim(expected, actual))
    }
}
