use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Power iteration did not settle; carries the last estimate.
    #[error("no convergence after {iterations} iterations (last estimate {last_estimate})")]
    ConvergenceFailure { iterations: usize, last_estimate: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("enumeration needs {needed} grid points, limit is {limit}")]
    CapacityExceeded { needed: usize, limit: usize },

    #[error("diverged at step {step}")]
    Divergence { step: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    TrainingDivergence { epoch: usize, batch: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
