//! Error type with a fixed exit-code policy: `1` for anything wrong with the
//! invocation or configuration (unparseable or invalid config, missing input
//! files, bad checkpoint contents), `2` for failures while the pipeline is
//! actually running (divergence, output I/O).

use std::path::PathBuf;

use scot_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing input file {path} ({role})")]
    MissingInput { path: PathBuf, role: &'static str },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CoreError },
    #[error("run failed: {0}")]
    Run(CoreError),
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MissingInput { .. } | CliError::Checkpoint { .. } => 1,
            CliError::Run(_) | CliError::Output { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
