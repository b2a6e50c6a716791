mod common;

use std::collections::BTreeSet;

use graphtune::graph::{encode, graph_to_tensors, CodeGraph, SuperGraphTemplate};
use graphtune::harness::metrics::{mse, mse_d, top_quarter};
use graphtune::kernel::{lower_to_loop_nest, toy_space, OpType};
use graphtune::model::{ModelDims, ModelState};
use graphtune::oracle::{measure, PlatformProfile};
use graphtune::record::TuningRecord;
use graphtune::rng::seeded;
use graphtune::search::{gp_fit, gp_predict, neighbor, tune_in_space, Arm, GpSurrogate, TuneConfig, TuneContext};
use proptest::prelude::*;

fn op_type() -> impl Strategy<Value = OpType> {
    prop::sample::select(OpType::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_text_round_trips(op in op_type(), seed in any::<u64>(), augmented in any::<bool>()) {
        let (spec, space, config) = common::random_case(op, &mut seeded(seed));
        let template = SuperGraphTemplate::all();
        let g = encode(&lower_to_loop_nest(&spec, &space, &config).unwrap(), augmented.then_some(&template)).unwrap();
        prop_assert_eq!(CodeGraph::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn augmentation_preserves_features(op in op_type(), seed in any::<u64>()) {
        let (spec, space, config) = common::random_case(op, &mut seeded(seed));
        let nest = lower_to_loop_nest(&spec, &space, &config).unwrap();
        let raw = encode(&nest, None).unwrap();
        let aug = encode(&nest, Some(&SuperGraphTemplate::all())).unwrap();
        prop_assert!(aug.nodes.len() >= raw.nodes.len());
        prop_assert_eq!(raw.feature_multiset(), aug.feature_multiset());
    }

    #[test]
    fn normalized_adjacency_is_symmetric(op in op_type(), seed in any::<u64>()) {
        let (spec, space, config) = common::random_case(op, &mut seeded(seed));
        let g = encode(&lower_to_loop_nest(&spec, &space, &config).unwrap(), None).unwrap();
        let a = graph_to_tensors(&g).normalized_adjacency;
        for i in 0..a.rows {
            prop_assert!(a[(i, i)] > 0.0);
            for j in 0..a.cols {
                prop_assert!((a[(i, j)] - a[(j, i)]).abs() < 1e-15);
                prop_assert!((0.0..=1.0).contains(&a[(i, j)]));
            }
        }
    }

    #[test]
    fn measurement_is_deterministic(op in op_type(), seed in any::<u64>()) {
        let (spec, space, config) = common::random_case(op, &mut seeded(seed));
        let p = PlatformProfile::platform_a();
        let m = measure(&spec, &space, &config, &p).unwrap();
        prop_assert_eq!(m, measure(&spec, &space, &config, &p).unwrap());
        let sane = if m.feasible { m.gflops > 0.0 && m.gflops.is_finite() } else { m.gflops == 0.0 };
        prop_assert!(sane);
    }

    #[test]
    fn neighbor_changes_at_most_one_knob(index in 0u64..256, seed in any::<u64>()) {
        let (_, space) = toy_space();
        let next = neighbor(&space, index, &mut seeded(seed));
        let (a, b) = (space.index_config(index).unwrap(), space.index_config(next).unwrap());
        prop_assert!(a.choices.iter().zip(&b.choices).filter(|(x, y)| x != y).count() <= 1);
    }

    #[test]
    fn gp_variance_is_bounded(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, -2.0f64..2.0), 1..10),
        probe in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let x: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let s = gp_fit(&GpSurrogate::new(2).with_observations(x.clone(), y)).unwrap();
        let (_, v) = gp_predict(&s, &[probe.0, probe.1]).unwrap();
        prop_assert!((0.0..=s.signal_variance + 1e-12).contains(&v));
        for xi in &x {
            let (_, vi) = gp_predict(&s, xi).unwrap();
            // one observation alone leaves k·σ²/(k+σ²) < σ²; more only shrink it
            prop_assert!(vi <= s.effective_noise() + 1e-12);
        }
    }

    #[test]
    fn top_quarter_holds_the_largest_measurements(ms in prop::collection::vec(0.0f64..1e4, 1..40)) {
        let pairs: Vec<(f64, f64)> = ms.iter().map(|&m| (m, m)).collect();
        let top = top_quarter(&pairs);
        prop_assert_eq!(top.len(), pairs.len().div_ceil(4));
        let floor = top.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        prop_assert!(pairs.iter().filter(|p| p.1 > floor).count() < top.len());
        prop_assert_eq!(mse(&pairs), Some(0.0));
        prop_assert_eq!(mse_d(&pairs), Some(0.0));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in 1usize..9) {
        let m = ModelState::init(ModelDims { gcn: vec![4, 3], head_hidden: hidden }, &mut seeded(seed));
        let back = ModelState::from_checkpoint_bytes(&m.to_checkpoint_bytes()).unwrap();
        prop_assert_eq!(back.to_checkpoint_bytes(), m.to_checkpoint_bytes());
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tuning_records_are_well_formed(seed in any::<u64>(), arm in prop::sample::select(vec![Arm::Xgb, Arm::Random])) {
        let (spec, space) = toy_space();
        let cfg = TuneConfig { budget: 48, ..TuneConfig::default() };
        let rec = tune_in_space(&spec, &space, arm, &PlatformProfile::platform_b(), &cfg, TuneContext::default(), seed).unwrap();
        prop_assert_eq!(rec.len(), 48);
        rec.validate().unwrap();
        let distinct: BTreeSet<u64> = rec.entries.iter().map(|e| e.config_index).collect();
        prop_assert_eq!(distinct.len(), rec.len());
        prop_assert!(rec.best_curve().windows(2).all(|w| w[0] <= w[1]));
        let back = TuningRecord::read_entries(rec.to_csv_string().as_bytes()).unwrap();
        prop_assert_eq!(back, rec.entries);
    }
}
