//! Training, evaluation, sweep and report commands behind the `quicknet` binary.

pub mod commands;
pub mod manifest;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] quicknet::Error),

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("incompatible manifests: {0}")]
    Incompatible(String),

    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    Usage(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Dataset { .. } => "data",
            CliError::Incompatible(_) => "report",
            CliError::Output { .. } => "io",
            CliError::Usage(_) => "config",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "data" => 2,
            "config" | "format" => 3,
            "checkpoint" => 4,
            "numeric" => 5,
            "io" => 6,
            "contract" => 7,
            _ => 8,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Output {
            path: path.into(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Worker threads for evaluation, from `QUICKNET_THREADS` (default 1, the
/// bit-reproducible reference mode).
pub fn eval_threads() -> usize {
    std::env::var("QUICKNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
