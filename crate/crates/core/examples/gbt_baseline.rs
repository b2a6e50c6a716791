//! Gradient-boosted trees on hand-crafted knob features: fit on one kernel,
//! then warm-start from other kernels' samples.
//!
//! cargo run --release --example gbt_baseline

use graphtune::baselines::{gbt_features, gbt_fit, gbt_predict, gbt_warm_start, GbtParams};
use graphtune::harness::held_out_kernels;
use graphtune::kernel::{build_knob_space, sample_configs, KernelSpec};
use graphtune::model::log2_gflops;
use graphtune::oracle::{measure, PlatformProfile};
use graphtune::rng::seeded;

fn samples(spec: &KernelSpec, n: usize, seed: u64) -> graphtune::Result<Vec<(Vec<f64>, f64)>> {
    let space = build_knob_space(spec);
    let p = PlatformProfile::platform_a();
    // feasible configs only, so the floor label of failed runs does not dominate the error
    let mut out = Vec::new();
    for c in sample_configs(&space, 2 * n, &mut seeded(seed)) {
        let m = measure(spec, &space, &c, &p)?;
        if m.feasible && out.len() < n {
            out.push((gbt_features(spec, &space, &c), log2_gflops(m.gflops)));
        }
    }
    Ok(out)
}

fn rmse(m: &graphtune::baselines::GbtModel, test: &[(Vec<f64>, f64)]) -> graphtune::Result<f64> {
    let mut acc = 0.0;
    for (x, y) in test {
        acc += (gbt_predict(m, x)? - y).powi(2);
    }
    Ok((acc / test.len() as f64).sqrt())
}

fn main() -> graphtune::Result<()> {
    let kernels = held_out_kernels();
    let target = &kernels[2];
    let test = samples(target, 500, 1)?;
    let prior: Vec<_> = kernels.iter().filter(|k| *k != target).map(|k| samples(k, 300, 2)).collect::<graphtune::Result<Vec<_>>>()?.concat();
    let hp = GbtParams::default();

    for n in [16, 64, 256] {
        let own = samples(target, n, 3)?;
        let plain = gbt_fit(&own, &hp)?;
        let warm = gbt_warm_start(&prior, &own, &hp, 0.2)?;
        println!("{n:>3} samples: rmse (log2 GFLOPS) plain {:.3}, warm-started {:.3}", rmse(&plain, &test)?, rmse(&warm, &test)?);
    }
    Ok(())
}
