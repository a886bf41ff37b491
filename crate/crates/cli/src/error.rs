use thiserror::Error;

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{failed} of {total} sweep cells failed")]
    PartialSweep { failed: usize, total: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::PartialSweep { .. } => 4,
            CliError::Io(_) => 1,
        }
    }

    /// Prefixes the message with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{stage}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{stage}: {m}")),
            other => other,
        }
    }
}

impl From<ctrldiffuse::Error> for CliError {
    fn from(e: ctrldiffuse::Error) -> Self {
        use ctrldiffuse::Error as E;
        match e {
            E::Validation(_) | E::Parse(_) => CliError::Validation(e.to_string()),
            E::Io(io) => CliError::Io(io),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}
