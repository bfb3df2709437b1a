use gcwm_core::error::{EmError, Error, SelectionError};
use gcwm_core::selection::FailureKind;

/// Failure classes mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Convergence(String),
    Sizing(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Sizing(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Convergence(m) | CliError::Sizing(m) => m,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        let msg = e.to_string();
        match FailureKind::of(&e) {
            FailureKind::Sizing => CliError::Sizing(msg),
            FailureKind::Convergence => CliError::Convergence(msg),
            FailureKind::Input => CliError::Input(msg),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Em(e) => e.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<gcwm_core::error::DataError> for CliError {
    fn from(e: gcwm_core::error::DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
