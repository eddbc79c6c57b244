//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; both operand shapes are reported.
    #[error("dimension mismatch in {op}: left shape {lhs:?} vs right shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, memory row, ...) beyond its extent.
    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A file did not match its expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),

    /// Two pieces of state that must agree do not (stale trace, checkpoint
    /// built for a different configuration, ...).
    #[error("state mismatch: {0}")]
    Consistency(String),

    /// Optimization broke down (non-finite gradients and the like).
    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
