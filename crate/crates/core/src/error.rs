//! Error type shared by all core modules.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class, used by the CLI to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    /// Invalid configuration or arguments.
    Config,
    /// Filesystem or format trouble.
    Io,
    /// Numerical failure (non-finite values, divergence).
    Numeric,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(
        "no voxel spacing for {path}: the file carries no spacing metadata and \
         no override was supplied (spacing is mandatory; there is no default)"
    )]
    MissingSpacing { path: PathBuf },

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }

    pub fn class(&self) -> FailureClass {
        match self {
            CoreError::Config(_) => FailureClass::Config,
            CoreError::Io { .. } | CoreError::Format { .. } | CoreError::MissingSpacing { .. } => {
                FailureClass::Io
            }
            CoreError::Numeric(_) => FailureClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
