use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Least squares on a design matrix without full column rank.
    #[error("singular design: numerical rank {rank} < {cols} active columns")]
    SingularDesign { rank: usize, cols: usize },

    /// Rejection sampling could not certify the requested separation.
    #[error("ladder construction failed after {attempts} attempts: {reason}")]
    Construction { attempts: usize, reason: String },

    /// Fewer records than needed to split an epoch into fit and test halves.
    #[error("insufficient data: need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Experiment configuration failed validation; every violated field is listed.
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("trial {trial} of algorithm `{algorithm}` (seed {seed}) failed: {source}")]
    Trial {
        trial: usize,
        algorithm: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
