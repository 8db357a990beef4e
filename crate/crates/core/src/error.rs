use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Report emitted when a training loop trips the divergence detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// Gradient step at which the loop aborted.
    pub step: u64,
    /// Mean critic loss observed at that step (may be non-finite).
    pub critic_loss: f64,
    pub ceiling: f64,
    pub reason: String,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "diverged at step {}: critic loss {} (ceiling {}): {}",
            self.step, self.critic_loss, self.ceiling, self.reason
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {what} (member {member:?}, batch index {batch_index:?})")]
    Numerical {
        what: String,
        member: Option<usize>,
        batch_index: Option<usize>,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("{0}")]
    Diverged(DivergenceReport),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numerical(what: impl Into<String>, member: Option<usize>, batch_index: Option<usize>) -> Self {
        Error::Numerical {
            what: what.into(),
            member,
            batch_index,
        }
    }
}
