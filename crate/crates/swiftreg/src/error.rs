use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the CLI and pipeline layers. `exit_code` maps each
/// variant to the documented process exit codes: 2 for configuration and
/// input problems, 3 for alignment failures.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad image file {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("bad JSON in {path}: {source}")]
    BadJson {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("no completed alignment level in manifest")]
    NoCompletedLevel,
    #[error("alignment failed for sections {0:?}: no valid matches")]
    AlignmentFailed(Vec<usize>),
    #[error(transparent)]
    Core(#[from] swiftreg_core::Error),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::AlignmentFailed(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
