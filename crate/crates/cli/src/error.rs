use std::path::PathBuf;

use mdsp::MdspError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] MdspError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Short tag printed in front of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                MdspError::Shape(_) => "shape",
                MdspError::InvalidArgument(_) => "argument",
                MdspError::Config(_) => "config",
                MdspError::Format(_) => "format",
                MdspError::Mismatch(_) => "mismatch",
                MdspError::Diverged(_) => "diverged",
                MdspError::Io(_) => "io",
                MdspError::Json(_) => "format",
            },
        }
    }

    /// 2 for bad input or configuration, 3 for a checkpoint that does not
    /// fit the configured model, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(MdspError::Config(_) | MdspError::InvalidArgument(_)) => 2,
            CliError::Core(MdspError::Mismatch(_)) => 3,
            _ => 1,
        }
    }
}
