//! Loop nest to graph: the raw root/for/iterval graph of one config and its
//! embedding into the super-graph shared by all operation types.
//!
//! cargo run --example graph_encoding

use graphtune::graph::{encode, graph_to_tensors, NodeKind, SuperGraphTemplate, FEATURE_NAMES};
use graphtune::harness::held_out_kernels;
use graphtune::kernel::{build_knob_space, lower_to_loop_nest, sample_configs, OpType};
use graphtune::rng::seeded;

fn main() -> graphtune::Result<()> {
    let template = SuperGraphTemplate::all();
    let mut rng = seeded(3);
    let base = held_out_kernels().remove(2);
    for op in OpType::ALL {
        let spec = graphtune::kernel::KernelSpec { op_type: op, in_channels: if op == OpType::Depthwise { base.out_channels } else { base.in_channels }, ..base.clone() };
        let space = build_knob_space(&spec);
        let config = sample_configs(&space, 1, &mut rng).remove(0);
        let nest = lower_to_loop_nest(&spec, &space, &config)?;
        let raw = encode(&nest, None)?;
        let aug = encode(&nest, Some(&template))?;
        let loops = raw.nodes.iter().filter(|n| n.kind == NodeKind::For).count();
        println!(
            "{:<12} raw {:>2} nodes ({loops} loops) -> augmented {} nodes, {} edges",
            op.name(),
            raw.nodes.len(),
            aug.nodes.len(),
            aug.edges.len()
        );
        assert_eq!(raw.feature_multiset(), aug.feature_multiset());
    }

    let spec = &base;
    let space = build_knob_space(spec);
    let g = encode(&lower_to_loop_nest(spec, &space, &space.index_config(0)?)?, None)?;
    let t = graph_to_tensors(&g);
    let first = g.nodes.iter().position(|n| n.feature.is_some()).expect("an iterval node");
    println!("\nfeatures of node {first}:");
    for (name, v) in FEATURE_NAMES.iter().zip(t.feature_matrix.row(first)) {
        println!("  {name:<20} {v:.3}");
    }
    println!("\n{}", g.to_text().lines().take(6).collect::<Vec<_>>().join("\n"));
    Ok(())
}
