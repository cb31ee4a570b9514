//! Error type shared by all modules.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numerical failure in iteration {iteration}: {context}")]
    NumericalFailure { iteration: usize, context: String },
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),
    #[error("state space too large: {states} states (limit {limit})")]
    StateSpaceTooLarge { states: u64, limit: u64 },
    #[error("channel not identifiable: {0}")]
    Identifiability(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for errors raised by non-finite intermediate values.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFailure { .. } | Error::Divergence(_))
    }
}
