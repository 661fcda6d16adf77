use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid arguments, config or request.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or unwritable files.
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] mmer_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) if e.is_data_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}
