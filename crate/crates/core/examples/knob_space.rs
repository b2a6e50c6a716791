//! Knob spaces: how a convolution task turns into a finite, indexable set of
//! schedules.
//!
//! cargo run --example knob_space

use graphtune::harness::held_out_kernels;
use graphtune::kernel::{build_knob_space, sample_configs, OpType};
use graphtune::rng::seeded;

fn main() -> graphtune::Result<()> {
    let spec = &held_out_kernels()[0];
    spec.validate()?;
    let space = build_knob_space(spec);
    println!("{}: {} configs, {:.2} GFLOP per run", spec.signature(), space.size(), spec.flops() / 1e9);
    for knob in &space.knobs {
        println!("  {:<22} {:>4} values, first {:?}", knob.name, knob.cardinality(), knob.values[0]);
    }

    let mut rng = seeded(1);
    for config in sample_configs(&space, 3, &mut rng) {
        let index = space.config_index(&config)?;
        assert_eq!(space.index_config(index)?, config);
        let coords: Vec<String> = space.coordinates(&config).iter().map(|c| format!("{c:.2}")).collect();
        println!("  index {index:>12} choices {:?} coords [{}]", config.choices, coords.join(", "));
    }

    // Other operation types drop the axes they do not have.
    for op in [OpType::Conv1d, OpType::Depthwise, OpType::Winograd] {
        let mut s = spec.clone();
        s.op_type = op;
        let space = build_knob_space(&s);
        let names: Vec<&str> = space.knobs.iter().map(|k| k.name.as_str()).collect();
        println!("{:<12} {:>12} configs over {}", op.name(), space.size(), names.join(" "));
    }
    Ok(())
}
