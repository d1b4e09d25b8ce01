use std::path::PathBuf;

use thiserror::Error;

/// Failures of the experiment runner.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, malformed config or inconsistent settings.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: ghm_cwap::Error,
    },

    #[error(transparent)]
    Core(#[from] ghm_cwap::Error),
}

impl CliError {
    /// Process exit code: 1 for usage and config errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(ghm_cwap::Error::InvalidArgument(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(ghm_cwap::Error) -> Self {
        let path = path.into();
        move |source| CliError::File { path, source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
