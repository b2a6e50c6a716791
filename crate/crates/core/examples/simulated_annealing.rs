//! Simulated annealing proposals scored by an arbitrary function, here the
//! oracle itself, and the xgb arm that anneals over a boosted-tree model.
//!
//! cargo run --release --example simulated_annealing

use graphtune::kernel::toy_space;
use graphtune::oracle::{enumerate, measure, PlatformProfile};
use graphtune::rng::seeded;
use graphtune::search::{sa_propose, tune_in_space, Arm, SaSchedule, TuneConfig, TuneContext, Visited};

fn main() -> graphtune::Result<()> {
    let (spec, space) = toy_space();
    let profile = PlatformProfile::platform_b();
    let optimum = enumerate(&spec, &space, &profile)?.iter().map(|m| m.gflops).fold(0.0, f64::max);

    let mut calls = 0;
    let score = |idx: &[u64]| {
        calls += idx.len();
        idx.iter().map(|&i| Ok(measure(&spec, &space, &space.index_config(i)?, &profile)?.gflops / optimum)).collect()
    };
    let sched = SaSchedule { steps_per_round: 64, parallel_chains: 4, ..SaSchedule::default() };
    let picks = sa_propose(score, &space, &sched, &Visited::new(), 8, &[], &mut seeded(0))?;
    println!("annealing on the true landscape proposed {picks:?} after {calls} scored configs");

    let cfg = TuneConfig { budget: 64, ..TuneConfig::default() };
    for seed in 0..3 {
        let r = tune_in_space(&spec, &space, Arm::Xgb, &profile, &cfg, TuneContext::default(), seed)?;
        println!("xgb arm seed {seed}: best {:.1} of {optimum:.1} GFLOPS", r.best());
    }
    Ok(())
}
