//! End to end on a reduced plan: dataset, pre-training and meta-training of
//! both model variants, then every arm on two held-out kernels.
//!
//! cargo run --release --example compare_arms [out-dir]

use graphtune::harness::dataset::DatasetParams;
use graphtune::harness::{build_inputs, held_out_kernels, run_experiment, ExperimentPlan};
use graphtune::meta::MetaConfig;
use graphtune::search::Arm;

fn main() -> graphtune::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let plan = ExperimentPlan {
        arms: Arm::ALL.to_vec(),
        kernels: held_out_kernels()[2..].to_vec(),
        budget: 160,
        seeds: vec![0, 1, 2],
        dataset: DatasetParams { num_classes: 16, samples_per_class: 60, ..DatasetParams::default() },
        meta: MetaConfig { pretrain_epochs: 8, outer_steps: 400, ..MetaConfig::default() },
        ..ExperimentPlan::default()
    };
    let inputs = build_inputs(&plan)?;
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
    }
    let report = run_experiment(&plan, &inputs, out.as_deref())?;
    println!("{:<10} {:>6} {:>12} {:>12} {:>9} {:>9}", "arm", "cells", "best/xgb", "iters", "mse", "mse_d");
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for s in report.arm_summaries(plan.budget) {
        println!(
            "{:<10} {:>6} {:>12} {:>12} {:>9} {:>9}",
            s.arm,
            s.cells,
            opt(s.median_normalized_to_xgb),
            opt(s.median_iterations_to_xgb_best),
            opt(s.mean_mse),
            opt(s.mean_mse_d)
        );
    }
    Ok(())
}
