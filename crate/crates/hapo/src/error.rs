//! Error taxonomy shared across the toolkit.

use thiserror::Error;

/// Anything that can go wrong building or running an experiment.
#[derive(Error, Debug)]
pub enum HapoError {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A precondition on operation inputs was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed demonstration or trajectory data.
    #[error("data error: {0}")]
    Data(String),

    /// Baseline estimation cannot proceed (e.g. group too small).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Rollout collection failed after exhausting retries.
    #[error("collection error: ticket {ticket_id}: {reason}")]
    Collection { ticket_id: u64, reason: String },

    /// An update produced non-finite numbers.
    #[error("numeric error at trajectory {trajectory_id}, timestep {timestep}: {reason}")]
    Numeric {
        trajectory_id: u64,
        timestep: usize,
        reason: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type HapoResult<T> = Result<T, HapoError>;
