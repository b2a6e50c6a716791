//! Batch BO on the 256-config toy space: a GP over knob coordinates picks
//! each batch by UCB, and the run is checked against exhaustive enumeration.
//!
//! cargo run --release --example bayesian_optimization

use graphtune::kernel::toy_space;
use graphtune::oracle::{enumerate, PlatformProfile};
use graphtune::search::{bo_search, gp_fit, gp_predict, GpSurrogate, TuneConfig};

fn main() -> graphtune::Result<()> {
    let (spec, space) = toy_space();
    let profile = PlatformProfile::platform_a();
    let optimum = enumerate(&spec, &space, &profile)?.iter().map(|m| m.gflops).fold(0.0, f64::max);
    let cfg = TuneConfig { budget: 64, ..TuneConfig::default() };

    for seed in 0..3 {
        let record = bo_search(&spec, &space, &profile, &cfg, seed)?;
        let hit = record.entries.iter().find(|e| e.measured_gflops == optimum).map(|e| e.iteration);
        println!("seed {seed}: best {:.1} of {optimum:.1} GFLOPS, optimum at iteration {hit:?}", record.best());
    }

    // The surrogate on its own: fit a 1-D toy function and query it.
    let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
    let y: Vec<f64> = x.iter().map(|v| (6.0 * v[0]).sin()).collect();
    let gp = gp_fit(&GpSurrogate::new(1).with_observations(x, y))?;
    println!("lengthscale {:.2}", gp.lengthscales[0]);
    for q in [0.05, 0.5, 0.95] {
        let (mean, var) = gp_predict(&gp, &[q])?;
        println!("  f({q}) = {mean:+.3} ± {:.3}  (true {:+.3})", var.sqrt(), (6.0 * q).sin());
    }
    Ok(())
}
