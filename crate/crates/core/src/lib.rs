//! Graph-based, meta-learned cost models for auto-tuning convolution kernels.
//!
//! Modules follow the tuning pipeline:
//!
//! * [`kernel`]: convolution tasks, their knob spaces and lowering to loop nests.
//! * [`graph`]: loop nest to root/for/iterval graphs, the shared super-graph
//!   template and augmentation into it.
//! * [`model`]: GCN, aggregation and MLP cost model with exact gradients.
//! * [`meta`]: supervised pre-training, few-shot task sampling, MAML and
//!   online fine-tuning.
//! * [`search`]: simulated annealing, GP-based batch Bayesian optimisation and
//!   the tune loop that drives both.
//! * [`oracle`]: a deterministic synthetic stand-in for hardware measurement.
//! * [`baselines`]: gradient-boosted trees (plain and warm-started) and random search.
//! * [`harness`]: dataset generation, metrics and experiment orchestration.
//!
//! The runnable programs under `examples/` walk through each of these pieces.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod meta;
pub mod model;
pub mod oracle;
pub mod record;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
