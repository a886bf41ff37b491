use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation or a hypothesis of a bound was violated.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("model evaluation produced a non-finite value at x = {x}, u = {u}")]
    ModelEvaluation { x: f64, u: f64 },

    #[error("value iteration did not converge after {iterations} sweeps (last sup-change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular linear system at pivot {0}")]
    Singular(usize),

    #[error("{count} state-action pairs were never visited")]
    Unvisited { count: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// `true` for errors caused by bad inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Parse(_))
    }
}
