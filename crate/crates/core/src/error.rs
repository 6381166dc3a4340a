use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence after {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        /// Last iterate of the solver, when one exists.
        last_iterate: Vec<f64>,
    },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("episode has no samples: {0}")]
    EmptyEpisode(String),

    #[error("training fault at batch {batch}: {message}")]
    TrainingFault { batch: usize, message: String },

    #[error("training diverged at batch {batch} (loss {loss:e})")]
    Diverged {
        batch: usize,
        loss: f64,
        history: Box<crate::koopman::LossHistory>,
    },

    #[error("plant diverged at step {step}")]
    PlantDiverged {
        step: usize,
        log: Box<crate::dempc::TrackingLog>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
