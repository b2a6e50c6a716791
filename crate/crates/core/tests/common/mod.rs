#![allow(dead_code)]

use graphtune::harness::dataset::{sample_spec, DatasetParams};
use graphtune::kernel::{build_knob_space, sample_configs, KernelSpec, KnobConfig, KnobSpace, OpType};
use rand::Rng;

/// A dataset-distribution kernel of the given type with one random config.
pub fn random_case<R: Rng>(op: OpType, rng: &mut R) -> (KernelSpec, KnobSpace, KnobConfig) {
    let params = DatasetParams::default();
    loop {
        let spec = sample_spec(op, &params, rng);
        if spec.validate().is_ok() {
            let space = build_knob_space(&spec);
            let config = sample_configs(&space, 1, rng).remove(0);
            return (spec, space, config);
        }
    }
}

/// Gauss-Jordan elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}
