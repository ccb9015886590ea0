use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Data {
        path: PathBuf,
        #[source]
        source: factlink_core::Error,
    },

    #[error(transparent)]
    Core(#[from] factlink_core::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use factlink_core::Error as E;
        let core = match self {
            CliError::Usage(_) => return 1,
            CliError::Path { .. } => return 2,
            CliError::Data { source, .. } => source,
            CliError::Core(e) => e,
        };
        match core {
            E::Config(_) => 1,
            E::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
