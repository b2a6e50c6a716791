//! The synthetic measurement oracle: the same configs on two platform
//! profiles, and a custom profile loaded from TOML.
//!
//! cargo run --example platform_profiles

use graphtune::harness::held_out_kernels;
use graphtune::kernel::{build_knob_space, sample_configs};
use graphtune::oracle::{batch_measure, PlatformProfile};
use graphtune::rng::seeded;

fn main() -> graphtune::Result<()> {
    let spec = &held_out_kernels()[0];
    let space = build_knob_space(spec);
    let configs = sample_configs(&space, 2000, &mut seeded(11));

    let mut custom = PlatformProfile::platform_a();
    custom.name = "small-cache".into();
    custom.l1_capacity = 16;
    let dir = std::env::temp_dir().join("graphtune-profile.toml");
    std::fs::write(&dir, custom.to_toml())?;

    for p in [PlatformProfile::platform_a(), PlatformProfile::platform_b(), PlatformProfile::resolve(&dir.to_string_lossy())?] {
        let ms = batch_measure(spec, &space, &configs, &p)?;
        let feasible: Vec<f64> = ms.iter().filter(|m| m.feasible).map(|m| m.gflops).collect();
        let best = ms.iter().enumerate().max_by(|a, b| a.1.gflops.total_cmp(&b.1.gflops)).map(|(i, _)| i).unwrap();
        println!(
            "{:<12} feasible {:>4}/{}  best {:>8.1} GFLOPS (sample {best})  median {:>7.1}",
            p.name,
            feasible.len(),
            ms.len(),
            ms[best].gflops,
            graphtune::harness::metrics::median(&feasible).unwrap_or(0.0)
        );
    }
    Ok(())
}
