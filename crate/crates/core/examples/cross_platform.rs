//! Models meta-trained on platform-A labels, tuning on platform-B against
//! the transfer-learning baseline that reuses platform-A samples.
//!
//! cargo run --release --example cross_platform

use graphtune::harness::dataset::DatasetParams;
use graphtune::harness::{build_inputs, held_out_kernels, run_experiment, ExperimentPlan};
use graphtune::meta::MetaConfig;
use graphtune::search::Arm;

fn main() -> graphtune::Result<()> {
    let plan = ExperimentPlan {
        arms: vec![Arm::Xgb, Arm::XgbXfer, Arm::MetaBoT],
        kernels: held_out_kernels()[..2].to_vec(),
        profile: "platform-B".into(),
        budget: 160,
        seeds: vec![0, 1],
        dataset: DatasetParams { num_classes: 16, samples_per_class: 60, ..DatasetParams::default() },
        meta: MetaConfig { pretrain_epochs: 8, outer_steps: 400, ..MetaConfig::default() },
        ..ExperimentPlan::default()
    };
    assert_eq!(plan.dataset.profile, "platform-A");
    let inputs = build_inputs(&plan)?;
    let report = run_experiment(&plan, &inputs, None)?;
    for e in &report.entries {
        println!("{:<10} {:<40} seed {}  best {:>8.1} GFLOPS", e.arm, e.kernel, e.seed, e.final_best);
    }
    Ok(())
}
