use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] itm_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Stable machine-readable code, printed as `error[CODE]: message`.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Io { .. } => "IO",
            CliError::Format(_) => "FORMAT",
            CliError::Json { .. } => "CONFIG",
            CliError::Csv(_) => "IO",
            CliError::Usage(_) => "USAGE",
        }
    }

    /// 2 for problems with the invocation itself, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use itm_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Json { .. } => 2,
            CliError::Core(E::InvalidConfig(_) | E::InvalidSpec(_) | E::InvalidHyperparameter { .. }) => 2,
            _ => 1,
        }
    }
}
