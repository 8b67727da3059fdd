use thiserror::Error;

/// Errors produced by environment generation, planning, inference and query
/// selection.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid state {state} (environment has {n_states} states)")]
    InvalidState { state: usize, n_states: usize },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("pool of {pool} proxies is too small for a query of size {query}")]
    PoolTooSmall { pool: usize, query: usize },

    #[error("query has no candidates")]
    EmptyQuery,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
