use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("dimension mismatch for `{id}`: expected {expected}, got {got}")]
    Dimension {
        id: String,
        expected: usize,
        got: usize,
    },

    #[error("marker collision in instance `{instance_id}`: {field} contains `{marker}`")]
    MarkerCollision {
        instance_id: String,
        field: &'static str,
        marker: String,
    },

    #[error("translator failed on instance `{instance_id}`: {message}")]
    Translator {
        instance_id: String,
        message: String,
    },

    #[error("no template for {task} in {language}: the benchmark has no {task} data in that language")]
    UnsupportedTemplate { task: String, language: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("no discordant pairs")]
    NoDiscordantPairs,
}

impl Error {
    pub fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from bad input rather than the run itself.
    /// The CLI maps this onto its exit code.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Translator { .. } | Error::NonFiniteLoss { .. } | Error::CheckFailed(_)
        )
    }
}
