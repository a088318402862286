use std::path::PathBuf;

use ilm_core::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ilm_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} already exists (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 2 invalid input or configuration, 3 I/O, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::InvalidInput => 2,
                ErrorKind::Io => 3,
                ErrorKind::Numeric => 4,
            },
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Exists(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "invalid_input",
            3 => "io",
            _ => "numeric",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
