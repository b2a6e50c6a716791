use graphtune::harness::dataset::held_out_kernels;
use graphtune::kernel::{build_knob_space, sample_indices};
use graphtune::oracle::{batch_measure, PlatformProfile};
use graphtune::rng::seeded;

/// Ranks starting at 0 with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            out[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn no_single_knob_explains_performance() {
    let spec = &held_out_kernels()[0];
    let space = build_knob_space(spec);
    let idx = sample_indices(space.size(), 10_000, &mut seeded(5));
    let configs: Vec<_> = idx.iter().map(|&i| space.index_config(i).unwrap()).collect();
    let ms = batch_measure(spec, &space, &configs, &PlatformProfile::platform_a()).unwrap();
    let gflops: Vec<f64> = ms.iter().map(|m| m.gflops).collect();
    assert!(ms.iter().filter(|m| m.feasible).count() > 1_000);
    let perf_ranks = ranks(&gflops);
    for (k, knob) in space.knobs.iter().enumerate() {
        let choice: Vec<f64> = configs.iter().map(|c| c.choices[k] as f64).collect();
        let rho = pearson(&ranks(&choice), &perf_ranks);
        assert!(rho.abs() < 0.8, "knob {} rank correlation {rho}", knob.name);
    }
}

#[test]
fn rank_helper_handles_ties() {
    assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
}
