//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, execution, and the CLI plumbing.
#[derive(Debug, Error)]
pub enum Error {
    /// The edge set contains a directed cycle.
    #[error("graph contains a cycle")]
    CycleDetected,

    /// A module on edge (src, dst) does not map the source layer shape
    /// onto the destination layer shape.
    #[error("shape mismatch on edge {src}->{dst}: {detail}")]
    ShapeMismatch { src: usize, dst: usize, detail: String },

    /// A layer lies on no input-to-output path.
    #[error("layer {0} is not on any input-to-output path")]
    DisconnectedLayer(usize),

    /// A layer other than the output has no outgoing edges.
    #[error("layer {0} has no outgoing edges but is not the output")]
    MultipleSinks(usize),

    /// A mask leaves the output layer unreachable from the input.
    #[error("mask does not connect the input layer to the output layer")]
    NotConnected,

    /// Backward called on a tape with no recorded operations.
    #[error("tape has no recorded operations")]
    EmptyTape,

    /// Exact schedule search requested on an instance above its size cap.
    #[error("exact schedule search supports at most {cap} timed edges, got {got}")]
    TooLargeForBruteForce { cap: usize, got: usize },

    /// Exhaustive mask enumeration requested on a graph above its size cap.
    #[error("exhaustive enumeration supports at most {cap} edges, got {got}")]
    TooLarge { cap: usize, got: usize },

    /// A schedule violates a dependency, capacity, or bookkeeping rule.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// A configuration file or parameter combination is invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A serialized artifact does not parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
