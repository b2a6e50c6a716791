//! Non-meta comparison models: least-squares gradient-boosted regression
//! trees over flattened knob features, their down-weighted transfer variant,
//! and uniform random search.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{sample_indices, KernelSpec, KnobConfig, KnobSpace, OpType, KNOB_TABLE};
use crate::oracle::{measure, PlatformProfile};
use crate::record::TuningRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams { n_trees: 100, max_depth: 4, learning_rate: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tree {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<Tree>, right: Box<Tree> },
}

impl Tree {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Tree::Leaf(v) => return *v,
                Tree::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            Tree::Leaf(_) => None,
            Tree::Split { feature, left, right, .. } => {
                [Some(*feature), left.max_feature(), right.max_feature()].into_iter().flatten().max()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub dim: usize,
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_trees: usize,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn validate(&self) -> Result<()> {
        match self.trees.iter().filter_map(Tree::max_feature).max() {
            Some(f) if f >= self.dim => Err(Error::domain(format!("tree splits on feature {f} of {}", self.dim))),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: GbtModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn gbt_predict(m: &GbtModel, x: &[f64]) -> Result<f64> {
    if x.len() != m.dim {
        return Err(Error::domain(format!("feature vector has {} entries, model expects {}", x.len(), m.dim)));
    }
    Ok(m.base_prediction + m.learning_rate * m.trees.iter().map(|t| t.eval(x)).sum::<f64>())
}

struct Fit<'a> {
    x: &'a [Vec<f64>],
    w: &'a [f64],
    /// Sample indices sorted by each feature, ties by index.
    order: Vec<Vec<usize>>,
    max_depth: usize,
}

impl Fit<'_> {
    fn leaf(&self, members: &[bool], r: &[f64]) -> f64 {
        let (mut s, mut wt) = (0.0, 0.0);
        for (i, &m) in members.iter().enumerate() {
            if m {
                s += self.w[i] * r[i];
                wt += self.w[i];
            }
        }
        if wt > 0.0 {
            s / wt
        } else {
            0.0
        }
    }

    fn grow(&self, members: &mut Vec<bool>, r: &[f64], depth: usize) -> Tree {
        if depth == self.max_depth {
            return Tree::Leaf(self.leaf(members, r));
        }
        let (mut s_all, mut w_all) = (0.0, 0.0);
        for (i, &m) in members.iter().enumerate() {
            if m {
                s_all += self.w[i] * r[i];
                w_all += self.w[i];
            }
        }
        let parent = if w_all > 0.0 { s_all * s_all / w_all } else { 0.0 };
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.order.iter().enumerate() {
            let (mut s_l, mut w_l) = (0.0, 0.0);
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| members[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.x[p][f], self.x[i][f]);
                    if a < b && w_l > 0.0 && w_all - w_l > 0.0 {
                        let (s_r, w_r) = (s_all - s_l, w_all - w_l);
                        let gain = s_l * s_l / w_l + s_r * s_r / w_r - parent;
                        if gain > 0.0 && best.is_none_or(|(g, _, _)| gain > g) {
                            best = Some((gain, f, a + (b - a) / 2.0));
                        }
                    }
                }
                s_l += self.w[i] * r[i];
                w_l += self.w[i];
                prev = Some(i);
            }
        }
        let Some((_, feature, threshold)) = best else {
            return Tree::Leaf(self.leaf(members, r));
        };
        let saved = members.clone();
        for (i, m) in members.iter_mut().enumerate() {
            *m = saved[i] && self.x[i][feature] <= threshold;
        }
        let left = self.grow(members, r, depth + 1);
        for (i, m) in members.iter_mut().enumerate() {
            *m = saved[i] && self.x[i][feature] > threshold;
        }
        let right = self.grow(members, r, depth + 1);
        *members = saved;
        Tree::Split { feature, threshold, left: Box::new(left), right: Box::new(right) }
    }
}

/// Weighted least-squares boosting. Splits maximize weighted variance
/// reduction; ties go to the lowest feature index, then the lowest threshold.
pub fn gbt_fit_weighted(samples: &[(Vec<f64>, f64)], weights: &[f64], hp: &GbtParams) -> Result<GbtModel> {
    let kept: Vec<usize> = (0..samples.len()).filter(|&i| weights[i] > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::domain("boosting needs at least one sample with positive weight"));
    }
    let dim = samples[kept[0]].0.len();
    if kept.iter().any(|&i| samples[i].0.len() != dim) {
        return Err(Error::domain("feature vectors differ in length"));
    }
    let x: Vec<Vec<f64>> = kept.iter().map(|&i| samples[i].0.clone()).collect();
    let y: Vec<f64> = kept.iter().map(|&i| samples[i].1).collect();
    let w: Vec<f64> = kept.iter().map(|&i| weights[i]).collect();
    let wt: f64 = w.iter().sum();
    let base = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / wt;
    let order = (0..dim)
        .map(|f| {
            let mut o: Vec<usize> = (0..x.len()).collect();
            o.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            o
        })
        .collect();
    let fit = Fit { x: &x, w: &w, order, max_depth: hp.max_depth };
    let mut pred = vec![base; x.len()];
    let mut trees = Vec::with_capacity(hp.n_trees);
    let mut members = vec![true; x.len()];
    for _ in 0..hp.n_trees {
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let tree = fit.grow(&mut members, &resid, 0);
        for (p, xi) in pred.iter_mut().zip(&x) {
            *p += hp.learning_rate * tree.eval(xi);
        }
        trees.push(tree);
    }
    Ok(GbtModel { dim, base_prediction: base, learning_rate: hp.learning_rate, max_depth: hp.max_depth, n_trees: hp.n_trees, trees })
}

pub fn gbt_fit(samples: &[(Vec<f64>, f64)], hp: &GbtParams) -> Result<GbtModel> {
    if samples.is_empty() {
        return Err(Error::domain("boosting needs at least one sample"));
    }
    gbt_fit_weighted(samples, &vec![1.0; samples.len()], hp)
}

/// Pools samples from other kernels, down-weighted by `prior_weight`, with
/// the target kernel's own measurements.
pub fn gbt_warm_start(
    prior: &[(Vec<f64>, f64)],
    new: &[(Vec<f64>, f64)],
    hp: &GbtParams,
    prior_weight: f64,
) -> Result<GbtModel> {
    if prior.is_empty() && new.is_empty() {
        return Err(Error::domain("warm start needs prior or new samples"));
    }
    let pooled: Vec<(Vec<f64>, f64)> = prior.iter().chain(new).cloned().collect();
    let weights: Vec<f64> = std::iter::repeat_n(prior_weight, prior.len()).chain(std::iter::repeat_n(1.0, new.len())).collect();
    if new.is_empty() || prior_weight > 0.0 {
        let weights = if new.is_empty() { vec![1.0; prior.len()] } else { weights };
        gbt_fit_weighted(&pooled, &weights, hp)
    } else {
        gbt_fit(new, hp)
    }
}

/// Length of [`gbt_features`] vectors.
pub const GBT_FEATURE_DIM: usize = KNOB_TABLE.len() + 6;

/// Knob value indices normalized by cardinality, in knob-table order (0 for
/// knobs the operation lacks), then the spec's signature features.
pub fn gbt_features(spec: &KernelSpec, space: &KnobSpace, config: &KnobConfig) -> Vec<f64> {
    let mut out = vec![0.0; GBT_FEATURE_DIM];
    for (k, choice) in space.knobs.iter().zip(&config.choices) {
        if let Some(pos) = KNOB_TABLE.iter().position(|(n, _)| *n == k.name) {
            out[pos] = *choice as f64 / k.cardinality() as f64;
        }
    }
    let base = KNOB_TABLE.len();
    out[base] = OpType::ALL.iter().position(|&o| o == spec.op_type).unwrap_or(0) as f64;
    out[base + 1] = (spec.input_size as f64).log2();
    out[base + 2] = (spec.in_channels as f64).log2();
    out[base + 3] = (spec.out_channels as f64).log2();
    out[base + 4] = spec.kernel_size as f64;
    out[base + 5] = spec.stride as f64;
    out
}

/// Uniform sampling without replacement, measured and recorded like any arm.
pub fn random_search_arm<R: Rng + ?Sized>(
    spec: &KernelSpec,
    space: &KnobSpace,
    profile: &PlatformProfile,
    budget: usize,
    seed: u64,
    rng: &mut R,
) -> Result<TuningRecord> {
    let mut record = TuningRecord::new(spec.clone(), "random", seed);
    for idx in sample_indices(space.size(), budget, rng) {
        let cfg = space.index_config(idx)?;
        record.push(idx, measure(spec, space, &cfg, profile)?, None);
    }
    Ok(record)
}
