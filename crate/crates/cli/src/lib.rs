//! Command-line harness: configuration, run ledger, stage orchestration and
//! reports.

pub mod commands;
pub mod config;
pub mod ledger;
pub mod plot;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error(transparent)]
    Core(#[from] nopt_core::Error),
}

impl CliError {
    /// 2 for bad configuration, 3 for a missing upstream artifact, 1 for a
    /// failed run.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}
