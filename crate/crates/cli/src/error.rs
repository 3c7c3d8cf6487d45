//! Error kinds of the command line, each with its own exit status.

use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable config, schema violation or inconsistent settings.
    #[error("config error: {0}")]
    Config(String),
    /// An upstream stage has not run, or its outputs do not match this config.
    #[error("{stage}: requires stage `{needs}`: {detail}")]
    Dependency {
        stage: String,
        needs: String,
        detail: String,
    },
    /// Anything that fails while a stage is running.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn runtime(context: &str, err: impl Display) -> Self {
        CliError::Runtime(format!("{context}: {err}"))
    }
}

/// Attaches a short context label to a core error.
pub trait Context<T> {
    fn ctx(self, context: &str) -> Result<T, CliError>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn ctx(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::runtime(context, e))
    }
}
