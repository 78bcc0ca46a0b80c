use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("line {line}: expert index {expert} out of range (N = {n_experts})")]
    ExpertOutOfRange {
        line: usize,
        expert: usize,
        n_experts: usize,
    },

    #[error("line {line}: layer index {layer} out of range (L = {n_layers})")]
    LayerOutOfRange {
        line: usize,
        layer: usize,
        n_layers: usize,
    },

    #[error("activation count overflow for token {token} expert {expert} in layer {layer}")]
    CountOverflow { layer: usize, token: u32, expert: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("instance too large for exhaustive search: {count} enumerations exceed the limit of {limit}")]
    InstanceTooLarge { count: u128, limit: u128 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("trace carries no routed expert records")]
    MissingRouting,

    #[error("local activation rate {0} outside [0, 1]")]
    InvalidAlpha(f64),

    #[error("bad table encoding: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True when the failure came from the filesystem rather than from data
    /// or configuration validation.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
