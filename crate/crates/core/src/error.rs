use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0} is singular or not positive definite")]
    Singular(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("subsystem {agent} is missing data from neighbor {neighbor}")]
    MissingNeighbor { agent: usize, neighbor: usize },

    #[error("message from subsystem {from} to subsystem {to} crosses a non-neighbor link")]
    Locality { from: usize, to: usize },

    #[error("solver diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("model reduction failed: {0}")]
    Reduction(String),

    #[error("observer design failed: {0}")]
    Observer(String),

    #[error("closed loop failed at step {step}: {source}")]
    ClosedLoop {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("phase-2 problem infeasible: {0}")]
    PinInfeasible(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
