//! Experiment orchestration: configuration, seed derivation, persistence
//! formats, stage execution with manifest-based skipping, and the CLI.

pub mod cli;
pub mod config;
pub mod io;
pub mod manifest;
pub mod seeds;
pub mod stages;

use std::path::PathBuf;

/// Error kinds map onto CLI exit codes: config problems exit 2, missing
/// prerequisites exit 3, failed result assertions exit 4, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("result assertion failed: {0}")]
    FailedAssertion(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingPrerequisite(_) => 3,
            HarnessError::FailedAssertion(_) => 4,
            HarnessError::Io { .. } | HarnessError::Format { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
