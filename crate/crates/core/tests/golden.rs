use std::fs::File;
use std::path::PathBuf;

use graphtune::baselines::random_search_arm;
use graphtune::graph::{encode, CodeGraph, SuperGraphTemplate};
use graphtune::kernel::{lower_to_loop_nest, toy_space};
use graphtune::oracle::{enumerate, read_enumeration, unique_argmax, Measurement, PlatformProfile};
use graphtune::rng::seeded;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden(profile: &str) -> Vec<Measurement> {
    read_enumeration(File::open(data(&format!("toy_{profile}.csv"))).unwrap()).unwrap()
}

#[test]
fn toy_enumerations_match_oracle() {
    let (spec, space) = toy_space();
    assert_eq!(space.size(), 256);
    for p in [PlatformProfile::platform_a(), PlatformProfile::platform_b()] {
        assert_eq!(enumerate(&spec, &space, &p).unwrap(), golden(&p.name), "{}", p.name);
    }
}

#[test]
fn toy_optima_are_unique_and_platform_specific() {
    let a = unique_argmax(&golden("platform-A")).expect("unique optimum on A");
    let b = unique_argmax(&golden("platform-B")).expect("unique optimum on B");
    assert_ne!(a, b);
}

#[test]
fn golden_graphs_match_encoder() {
    let (spec, space) = toy_space();
    let nest = lower_to_loop_nest(&spec, &space, &space.index_config(0).unwrap()).unwrap();
    let raw = encode(&nest, None).unwrap();
    let aug = encode(&nest, Some(&SuperGraphTemplate::all())).unwrap();
    let raw_text = std::fs::read_to_string(data("toy_raw.graph")).unwrap();
    let aug_text = std::fs::read_to_string(data("toy_augmented.graph")).unwrap();
    assert_eq!(raw.to_text(), raw_text);
    assert_eq!(aug.to_text(), aug_text);
    assert_eq!(CodeGraph::from_text(&raw_text).unwrap(), raw);
    assert_eq!(CodeGraph::from_text(&aug_text).unwrap(), aug);
}

/// Random search without replacement finds the unique optimum of n configs
/// with probability budget / n; over many seeds the hit rate tracks it.
#[test]
fn random_search_hit_rate() {
    let (spec, space) = toy_space();
    let p = PlatformProfile::platform_a();
    let best = golden(&p.name).iter().map(|m| m.gflops).fold(0.0, f64::max);
    let runs = 400;
    let hits = (0..runs)
        .filter(|&s| random_search_arm(&spec, &space, &p, 64, s, &mut seeded(s)).unwrap().best() == best)
        .count();
    let rate = hits as f64 / runs as f64;
    // p = 0.25, sd over 400 runs is about 0.022
    assert!((rate - 0.25).abs() < 0.08, "hit rate {rate}");
}
