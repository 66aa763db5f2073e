use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("weights diverged at epoch {epoch}: max |w| = {max_abs:e} exceeds ceiling {ceiling:e}")]
    Divergence {
        epoch: u64,
        max_abs: f64,
        ceiling: f64,
        weights: Vec<f64>,
    },

    #[error("truncated state space has {states} states (limit {limit}); about {bytes} bytes of kernel storage required")]
    StateSpaceTooLarge { states: u64, limit: u64, bytes: u64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("rank-deficient system (condition number {condition:e}); dependent feature columns {columns:?}")]
    RankDeficient { columns: Vec<usize>, condition: f64 },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
