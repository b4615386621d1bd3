use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lvat_core::Error),

    /// Bad flags, configuration or input files.
    #[error("{0}")]
    Usage(String),

    /// A check or computation that ran and did not succeed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 0 is success, 1 an assertion or numerical failure, 2 a usage or
    /// input error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}
