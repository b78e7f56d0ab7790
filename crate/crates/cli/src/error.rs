use std::path::PathBuf;

use thiserror::Error;

use advrep_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `advrep {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config, 3 missing artifact, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Json(_)
                | CoreError::Parse { .. }
                | CoreError::Csv { .. }
                | CoreError::Label(_)
                | CoreError::UnknownLayer { .. }
                | CoreError::Stratification(_) => 2,
                CoreError::NonFinite(_)
                | CoreError::Contract(_)
                | CoreError::Dimension { .. }
                | CoreError::BatchTooSmall(_) => 4,
                CoreError::Io { .. } => 1,
            },
        }
    }
}
