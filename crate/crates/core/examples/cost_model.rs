//! The GCN cost model: forward pass, exact gradients and a few SGD steps on
//! measured configs of one kernel.
//!
//! cargo run --release --example cost_model

use graphtune::graph::encode;
use graphtune::harness::held_out_kernels;
use graphtune::kernel::{build_knob_space, lower_to_loop_nest, sample_configs};
use graphtune::model::{FeatureNorm, GradScope, LabelNorm, ModelDims, ModelState};
use graphtune::oracle::{measure, PlatformProfile};
use graphtune::rng::seeded;

fn main() -> graphtune::Result<()> {
    let spec = &held_out_kernels()[1];
    let space = build_knob_space(spec);
    let profile = PlatformProfile::platform_a();
    let mut rng = seeded(7);

    let mut graphs = Vec::new();
    let mut gflops = Vec::new();
    for config in sample_configs(&space, 64, &mut rng) {
        graphs.push(encode(&lower_to_loop_nest(spec, &space, &config)?, None)?);
        gflops.push(measure(spec, &space, &config, &profile)?.gflops);
    }

    let mut model = ModelState::init(ModelDims::default(), &mut rng);
    model.feature_norm = FeatureNorm::fit(graphs.iter().flat_map(|g| g.nodes.iter().filter_map(|n| n.feature.as_ref())));
    model.label_norm = LabelNorm::fit(gflops.iter().copied());
    let batch: Vec<_> = graphs.into_iter().zip(gflops.iter().map(|&g| model.label_norm.normalize(g))).collect();
    println!("{} parameters", model.params_flat().len());

    for step in 0..=1000 {
        let (loss, grads) = model.grad(&batch, GradScope::All)?;
        if step % 200 == 0 {
            println!("step {step:>3}  mse {loss:.4}");
        }
        model.sgd_step(&grads, 0.01)?;
    }
    // infeasible configs are labeled with the 1e-3 GFLOPS floor
    for (g, &measured) in batch.iter().map(|b| &b.0).zip(&gflops).filter(|(_, m)| **m > 0.0).take(6) {
        println!("predicted {:>8.1}  measured {:>8.1} GFLOPS", model.predict_gflops(g)?, measured);
    }
    Ok(())
}
