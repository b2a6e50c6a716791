//! Supervised pre-training, few-shot task sampling, MAML meta-training and
//! online fine-tuning of the cost model.
//!
//! After pre-training the GCN and aggregation weights are frozen; every later
//! phase only moves the head. Because the embedding is frozen, graphs are
//! embedded once and the MAML machinery works on flat head parameter vectors
//! through the [`Learner`] trait.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CodeGraph;
use crate::model::{
    head_grad, head_hvp, head_loss, FeatureNorm, GradScope, HeadParams, LabelNorm, ModelDims, ModelState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub graph: CodeGraph,
    pub kernel_class: String,
    pub label_gflops: f64,
}

/// One N-way K-shot episode. Samples are indices into the dataset the task
/// was drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Inner-loop (adaptation) learning rate.
    pub alpha: f64,
    /// Outer-loop (meta) learning rate.
    pub beta: f64,
    /// Pre-training learning rate.
    pub gamma: f64,
    pub pretrain_epochs: usize,
    pub inner_steps: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query samples per class, capped by what the class has left.
    pub k_query: usize,
    pub meta_batch: usize,
    pub outer_steps: usize,
    pub first_order: bool,
    pub seed: u64,
    pub dims: ModelDims,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.01,
            beta: 0.001,
            gamma: 0.005,
            pretrain_epochs: 30,
            inner_steps: 1,
            n_way: 3,
            k_shot: 2,
            k_query: 2,
            meta_batch: 8,
            outer_steps: 2000,
            first_order: true,
            seed: 0,
            dims: ModelDims::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("learning rates must be non-negative (gamma positive)".into()));
        }
        if self.inner_steps == 0 || self.n_way == 0 || self.k_shot == 0 || self.meta_batch == 0 {
            return Err(Error::Config("inner_steps, n_way, k_shot and meta_batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// A differentiable model over a flat parameter vector, as seen by MAML.
pub trait Learner: Sync {
    type Sample: Sync;
    fn loss(&self, params: &[f64], batch: &[Self::Sample]) -> f64;
    fn grad(&self, params: &[f64], batch: &[Self::Sample]) -> Vec<f64>;
    /// Hessian of the batch loss at `params` times `v`.
    fn hvp(&self, params: &[f64], batch: &[Self::Sample], v: &[f64]) -> Vec<f64>;
}

/// The cost-model head over precomputed embeddings.
pub struct HeadLearner {
    shape: HeadParams,
}

impl HeadLearner {
    pub fn new(shape: &HeadParams) -> Self {
        HeadLearner { shape: shape.clone() }
    }
}

impl Learner for HeadLearner {
    type Sample = (Vec<f64>, f64);

    fn loss(&self, params: &[f64], batch: &[Self::Sample]) -> f64 {
        head_loss(&self.shape.with_flat(params), batch)
    }

    fn grad(&self, params: &[f64], batch: &[Self::Sample]) -> Vec<f64> {
        match head_grad(&self.shape.with_flat(params), batch) {
            Ok((_, g)) => g.to_flat(),
            Err(_) => vec![0.0; params.len()],
        }
    }

    fn hvp(&self, params: &[f64], batch: &[Self::Sample], v: &[f64]) -> Vec<f64> {
        let h = self.shape.with_flat(params);
        match head_hvp(&h, batch, &self.shape.with_flat(v)) {
            Ok(hv) => hv.to_flat(),
            Err(_) => vec![0.0; params.len()],
        }
    }
}

/// Scalar model `f(θ) = θ` under squared loss: each sample is a target and
/// the loss is `mean (θ − y)²`. Its MAML update has a closed form.
pub struct ScalarQuadratic;

impl Learner for ScalarQuadratic {
    type Sample = f64;

    fn loss(&self, p: &[f64], batch: &[f64]) -> f64 {
        batch.iter().map(|y| (p[0] - y).powi(2)).sum::<f64>() / batch.len().max(1) as f64
    }

    fn grad(&self, p: &[f64], batch: &[f64]) -> Vec<f64> {
        vec![batch.iter().map(|y| 2.0 * (p[0] - y)).sum::<f64>() / batch.len().max(1) as f64]
    }

    fn hvp(&self, _p: &[f64], batch: &[f64], v: &[f64]) -> Vec<f64> {
        vec![if batch.is_empty() { 0.0 } else { 2.0 * v[0] }]
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// θ' after `steps` gradient steps on the support loss, plus the parameters
/// visited before each step.
fn adapt_trajectory<L: Learner>(
    learner: &L,
    params: &[f64],
    support: &[L::Sample],
    alpha: f64,
    steps: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut theta = params.to_vec();
    let mut visited = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = learner.grad(&theta, support);
        visited.push(theta.clone());
        axpy(&mut theta, -alpha, &g);
    }
    (theta, visited)
}

pub fn inner_adapt_flat<L: Learner>(
    learner: &L,
    params: &[f64],
    support: &[L::Sample],
    alpha: f64,
    steps: usize,
) -> Vec<f64> {
    adapt_trajectory(learner, params, support, alpha, steps).0
}

/// Outcome of one outer update.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepOutcome {
    pub params: Vec<f64>,
    /// Mean pre-adaptation support loss over tasks.
    pub support_loss: f64,
    /// Mean post-adaptation query loss over tasks.
    pub query_loss: f64,
}

/// θ ← θ − β Σ_i ∇θ L_query(θ'_i). With `first_order` the adaptation is
/// treated as constant; otherwise the gradient is carried back through every
/// inner step with Hessian-vector products.
pub fn meta_step_flat<L: Learner>(
    learner: &L,
    params: &[f64],
    tasks: &[(Vec<L::Sample>, Vec<L::Sample>)],
    alpha: f64,
    beta: f64,
    inner_steps: usize,
    first_order: bool,
) -> Result<MetaStepOutcome> {
    if tasks.is_empty() {
        return Err(Error::domain("meta step needs at least one task"));
    }
    let per_task: Vec<(Vec<f64>, f64, f64)> = tasks
        .par_iter()
        .map(|(support, query)| {
            let support_loss = learner.loss(params, support);
            let (adapted, visited) = adapt_trajectory(learner, params, support, alpha, inner_steps);
            let query_loss = learner.loss(&adapted, query);
            let mut g = learner.grad(&adapted, query);
            if !first_order {
                for theta in visited.iter().rev() {
                    let hv = learner.hvp(theta, support, &g);
                    axpy(&mut g, -alpha, &hv);
                }
            }
            (g, support_loss, query_loss)
        })
        .collect();
    let mut total = vec![0.0; params.len()];
    let (mut sl, mut ql) = (0.0, 0.0);
    for (g, s, q) in &per_task {
        axpy(&mut total, 1.0, g);
        sl += s;
        ql += q;
    }
    let mut out = params.to_vec();
    axpy(&mut out, -beta, &total);
    let n = tasks.len() as f64;
    Ok(MetaStepOutcome { params: out, support_loss: sl / n, query_loss: ql / n })
}

/// Embeddings and normalized labels of a dataset under a frozen GCN.
#[derive(Clone, Debug)]
pub struct EmbeddedDataset {
    pub samples: Vec<(Vec<f64>, f64)>,
    pub classes: Vec<String>,
}

impl EmbeddedDataset {
    pub fn build(model: &ModelState, dataset: &[LabeledSample]) -> Result<Self> {
        let samples = dataset
            .par_iter()
            .map(|s| Ok((model.embed(&s.graph)?, model.label_norm.normalize(s.label_gflops))))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddedDataset { samples, classes: dataset.iter().map(|s| s.kernel_class.clone()).collect() })
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<(Vec<f64>, f64)> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Initializes θ, fits feature and label normalization on the dataset, then
/// runs per-sample SGD over the whole model for `pretrain_epochs` epochs.
pub fn pretrain<R: Rng + ?Sized>(dataset: &[LabeledSample], cfg: &MetaConfig, rng: &mut R) -> Result<ModelState> {
    if dataset.is_empty() {
        return Err(Error::domain("pre-training dataset is empty"));
    }
    cfg.validate()?;
    let mut model = ModelState::init(cfg.dims.clone(), rng);
    model.feature_norm = FeatureNorm::fit(dataset.iter().flat_map(|s| s.graph.nodes.iter().filter_map(|n| n.feature.as_ref())));
    model.label_norm = LabelNorm::fit(dataset.iter().map(|s| s.label_gflops));
    let prepared: Vec<_> = dataset
        .iter()
        .map(|s| (model.prepare(&s.graph), model.label_norm.normalize(s.label_gflops)))
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, g) = model.grad_prepared(std::slice::from_ref(&prepared[i]), GradScope::All)?;
            total += loss;
            model.sgd_step(&g, cfg.gamma)?;
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("pre-training diverged at epoch {epoch}")));
        }
        log::debug!("pretrain epoch {epoch}: mean loss {mean:.5}");
    }
    Ok(model)
}

/// Mean squared error of the whole model over a dataset on the normalized scale.
pub fn dataset_loss(model: &ModelState, dataset: &[LabeledSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in dataset {
        total += (model.forward(&s.graph)? - model.label_norm.normalize(s.label_gflops)).powi(2);
    }
    Ok(total / dataset.len().max(1) as f64)
}

/// Samples `meta_batch` N-way K-shot tasks with disjoint support and query sets.
pub fn sample_meta_tasks<R: Rng + ?Sized>(classes: &[String], cfg: &MetaConfig, rng: &mut R) -> Result<Vec<MetaTask>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        by_class.entry(c.as_str()).or_default().push(i);
    }
    let eligible: Vec<(&str, &Vec<usize>)> =
        by_class.iter().filter(|(_, v)| v.len() > cfg.k_shot).map(|(k, v)| (*k, v)).collect();
    if eligible.len() < cfg.n_way {
        let deficient = by_class
            .iter()
            .find(|(_, v)| v.len() <= cfg.k_shot)
            .map(|(k, v)| format!("class {k} has {} samples, needs {}", v.len(), cfg.k_shot + 1))
            .unwrap_or_else(|| format!("only {} classes, need {}", by_class.len(), cfg.n_way));
        return Err(Error::domain(format!("cannot build {}-way {}-shot tasks: {deficient}", cfg.n_way, cfg.k_shot)));
    }
    let mut tasks = Vec::with_capacity(cfg.meta_batch);
    for _ in 0..cfg.meta_batch {
        let picked = rand::seq::index::sample(rng, eligible.len(), cfg.n_way);
        let mut task = MetaTask { support: Vec::new(), query: Vec::new(), classes: Vec::new() };
        for ci in picked.into_iter() {
            let (name, members) = eligible[ci];
            let q = cfg.k_query.max(1).min(members.len() - cfg.k_shot);
            let draw = rand::seq::index::sample(rng, members.len(), cfg.k_shot + q);
            let draw: Vec<usize> = draw.into_iter().map(|j| members[j]).collect();
            task.support.extend_from_slice(&draw[..cfg.k_shot]);
            task.query.extend_from_slice(&draw[cfg.k_shot..]);
            task.classes.push(name.to_string());
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Adapted head after `inner_steps` gradient steps on the support set; the
/// model itself is not modified.
pub fn inner_adapt(model: &ModelState, support: &[LabeledSample], alpha: f64, inner_steps: usize) -> Result<HeadParams> {
    if support.is_empty() {
        return Err(Error::domain("empty support set"));
    }
    let batch = embed_batch(model, support)?;
    let learner = HeadLearner::new(&model.head);
    Ok(model.head.with_flat(&inner_adapt_flat(&learner, &model.head.to_flat(), &batch, alpha, inner_steps)))
}

fn embed_batch(model: &ModelState, samples: &[LabeledSample]) -> Result<Vec<(Vec<f64>, f64)>> {
    samples
        .iter()
        .map(|s| Ok((model.embed(&s.graph)?, model.label_norm.normalize(s.label_gflops))))
        .collect()
}

/// One outer MAML update of the head over tasks drawn from `data`.
pub fn meta_step(model: &ModelState, tasks: &[MetaTask], data: &EmbeddedDataset, cfg: &MetaConfig) -> Result<(ModelState, MetaStepOutcome)> {
    let learner = HeadLearner::new(&model.head);
    let batches: Vec<_> = tasks.iter().map(|t| (data.gather(&t.support), data.gather(&t.query))).collect();
    let out = meta_step_flat(&learner, &model.head.to_flat(), &batches, cfg.alpha, cfg.beta, cfg.inner_steps, cfg.first_order)?;
    let mut next = model.clone();
    next.head.set_flat(&out.params);
    Ok((next, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub support_loss: f64,
    pub query_loss: f64,
}

/// `outer_steps` rounds of task sampling and meta updates. Per-step losses
/// are returned and, when `log` is given, appended to it as CSV.
pub fn meta_train<R: Rng + ?Sized>(
    model: &ModelState,
    dataset: &[LabeledSample],
    cfg: &MetaConfig,
    rng: &mut R,
    log: Option<&mut dyn Write>,
) -> Result<(ModelState, Vec<StepLoss>)> {
    cfg.validate()?;
    if cfg.outer_steps == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    let data = EmbeddedDataset::build(model, dataset)?;
    meta_train_embedded(model, &data, cfg, rng, log)
}

pub fn meta_train_embedded<R: Rng + ?Sized>(
    model: &ModelState,
    data: &EmbeddedDataset,
    cfg: &MetaConfig,
    rng: &mut R,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelState, Vec<StepLoss>)> {
    let mut current = model.clone();
    let mut history = Vec::with_capacity(cfg.outer_steps);
    if let Some(w) = log.as_mut() {
        writeln!(w, "step,support_loss,query_loss")?;
    }
    for step in 0..cfg.outer_steps {
        let tasks = sample_meta_tasks(&data.classes, cfg, rng)?;
        let (next, out) = meta_step(&current, &tasks, data, cfg)?;
        if !out.query_loss.is_finite() {
            return Err(Error::Numeric(format!("meta-training diverged at step {step}")));
        }
        current = next;
        let rec = StepLoss { step, support_loss: out.support_loss, query_loss: out.query_loss };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{}", rec.step, rec.support_loss, rec.query_loss)?;
        }
        history.push(rec);
    }
    Ok((current, history))
}

/// Head-only adaptation to measurements of a single tuning target: `steps`
/// full-batch gradient steps over the whole measurement set.
pub fn fine_tune(model: &ModelState, measurements: &[LabeledSample], alpha: f64, steps: usize) -> Result<ModelState> {
    if measurements.is_empty() || steps == 0 {
        return Ok(model.clone());
    }
    let batch = embed_batch(model, measurements)?;
    let mut out = model.clone();
    out.head = fine_tune_head(&model.head, &batch, alpha, steps)?;
    Ok(out)
}

pub fn fine_tune_head(head: &HeadParams, batch: &[(Vec<f64>, f64)], alpha: f64, steps: usize) -> Result<HeadParams> {
    let mut h = head.clone();
    if batch.is_empty() {
        return Ok(h);
    }
    for _ in 0..steps {
        let (_, g) = head_grad(&h, batch)?;
        h = crate::model::sgd_step(&h, &g, alpha)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{}", i % 5)).collect()
    }

    #[test]
    fn three_way_two_shot_shapes() {
        let cfg = MetaConfig::default();
        let tasks = sample_meta_tasks(&labels(50), &cfg, &mut seeded(1)).unwrap();
        assert_eq!(tasks.len(), cfg.meta_batch);
        for t in tasks {
            assert_eq!(t.support.len(), 6);
            assert_eq!(t.classes.len(), 3);
            let mut uniq = t.classes.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 3);
            assert!(t.query.iter().all(|q| !t.support.contains(q)));
        }
    }

    #[test]
    fn minimal_classes_leave_one_query() {
        let cfg = MetaConfig { k_shot: 2, k_query: 5, ..MetaConfig::default() };
        let tasks = sample_meta_tasks(&labels(15), &cfg, &mut seeded(2)).unwrap();
        assert!(tasks.iter().all(|t| t.query.len() == 3));
    }

    #[test]
    fn deficient_dataset_names_the_class() {
        let cfg = MetaConfig::default();
        let mut classes = labels(15);
        classes.push("lonely".into());
        let err = sample_meta_tasks(&classes, &MetaConfig { n_way: 6, ..cfg }, &mut seeded(3)).unwrap_err();
        assert!(err.to_string().contains("lonely"), "{err}");
    }

    #[test]
    fn scalar_inner_step_closed_form() {
        let (theta, y, alpha) = (1.5, 0.25, 0.1);
        let adapted = inner_adapt_flat(&ScalarQuadratic, &[theta], &[y], alpha, 1);
        assert_eq!(adapted[0], theta - alpha * 2.0 * (theta - y));
        assert_eq!(inner_adapt_flat(&ScalarQuadratic, &[theta], &[y], 0.0, 3)[0], theta);
        assert_eq!(inner_adapt_flat(&ScalarQuadratic, &[y], &[y], 0.3, 3)[0], y);
    }

    #[test]
    fn fine_tune_without_data_is_identity() {
        let h = HeadParams::init(4, 3, &mut seeded(4));
        assert_eq!(fine_tune_head(&h, &[], 0.1, 5).unwrap(), h);
    }
}
