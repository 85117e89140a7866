//! Budget-constrained architecture search over super network DAGs.
//!
//! A super network is a DAG whose edges carry neural modules and whose
//! layers aggregate incoming edge outputs by summation. Training jointly
//! learns module weights and per-edge selection probabilities under a
//! resource budget (mult-adds, parameters, or distributed-schedule
//! makespan), then extracts the cost/accuracy Pareto front over trained
//! candidates.
//!
//! Module map:
//! - [`graph`]: DAG representation, validation, masks, pruning, text format
//! - [`tensor`]: dense float32 tensors
//! - [`params`]: parameter storage, init, binary checkpoints
//! - [`compute`]: tape-based forward/backward over masked graphs, losses
//! - [`sampler`]: per-edge Bernoulli architecture distribution
//! - [`cost`]: cost evaluators (flops, params, distributed makespan)
//! - [`schedule`]: DAG list scheduling and exact small-instance search
//! - [`fabric`]: graph generators (residual fabric, convolutional grid)
//! - [`dataset`]: built-in toy datasets
//! - [`trainer`]: budgeted stochastic training loop
//! - [`selection`]: model evaluation and Pareto-front extraction
//! - [`experiment`]: config files, run artifacts, budget/seed sweeps
//! - [`verify`]: self-contained end-to-end checks used by the CLI

// Index loops in the numeric kernels mirror the math; iterator
// rewrites hide which axis is walked.
#![allow(clippy::needless_range_loop)]

pub mod compute;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fabric;
pub mod graph;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod selection;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
