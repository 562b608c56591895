use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes are derived from
/// [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("utterance {id}: {reason}")]
    Utterance { id: String, reason: String },

    #[error("unknown phoneme symbol `{0}`")]
    UnknownPhoneme(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn utterance(id: &str, reason: impl Into<String>) -> Self {
        Error::Utterance { id: id.to_string(), reason: reason.into() }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::UnknownPhoneme(_) | Error::Shape(_) | Error::Utterance { .. }
        )
    }
}
