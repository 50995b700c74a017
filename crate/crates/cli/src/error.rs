use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("stale artifact: {0} (rerun the upstream stage or pass --force)")]
    Stale(String),
    #[error(transparent)]
    Core(#[from] msrf_core::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 3 for numerical failures,
    /// 2 for everything else about the data.
    pub fn exit_code(&self) -> i32 {
        use msrf_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(
                E::ConvergenceFailure(_) | E::NonFinite(_) | E::NonFiniteLoss { .. } | E::AllMaskedRow(_),
            ) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
