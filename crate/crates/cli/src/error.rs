use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or inputs; nothing was written.
    #[error("{0}")]
    Invalid(String),
    /// Failure while the command was running.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub trait Context<T> {
    fn invalid(self, what: &str) -> Result<T>;
    fn runtime(self, what: &str) -> Result<T>;
}

impl<T, E: std::fmt::Display> Context<T> for std::result::Result<T, E> {
    fn invalid(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Invalid(format!("{what}: {e}")))
    }

    fn runtime(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}
