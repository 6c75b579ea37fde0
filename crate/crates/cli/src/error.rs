use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("solver error: {0}")]
    Solver(#[from] nlfrac::Error),

    #[error("recovery aborted: {0}")]
    Aborted(String),

    #[error("{0}")]
    Check(String),

    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Solver(_) | CliError::Aborted(_) | CliError::Check(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}
