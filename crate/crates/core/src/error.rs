use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong across the pipeline.
///
/// Each variant maps onto a coarse [`ErrorCategory`] so the command-line
/// front end can print a stable, greppable error line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}: {losses}")]
    NonFinite { step: u64, losses: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Protocol,
    Parse,
    Training,
    Checkpoint,
    Config,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Input => "input",
            ErrorCategory::Protocol => "protocol",
            ErrorCategory::Parse => "parse",
            ErrorCategory::Training => "training",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape(_) | Error::InvalidInput(_) => ErrorCategory::Input,
            Error::Protocol(_) => ErrorCategory::Protocol,
            Error::Parse { .. } => ErrorCategory::Parse,
            Error::NonFinite { .. } => ErrorCategory::Training,
            Error::Checkpoint(_) => ErrorCategory::Checkpoint,
            Error::Config(_) => ErrorCategory::Config,
            Error::MissingArtifact(_) | Error::Image { .. } | Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
