//! Candidate selection: simulated annealing over config indices, Gaussian
//! process regression with batch UCB, and the tune loop tying proposals,
//! measurement and model updates together.

mod bo;
mod gp;
mod sa;
mod tune;

use std::collections::HashSet;

pub use bo::{bo_propose_batch, ucb_select, BoParams};
pub use gp::{gp_fit, gp_fit_fixed, gp_predict, se_kernel, GpSurrogate};
pub use sa::{neighbor, sa_propose, SaSchedule};
pub use tune::{bo_search, tune, tune_in_space, Arm, TuneConfig, TuneContext};

/// Config indices already measured in a run.
pub type Visited = HashSet<u64>;
