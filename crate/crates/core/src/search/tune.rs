use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bo::{bo_propose_batch, draw_unvisited, ucb_select, BoParams};
use super::gp::{gp_fit, GpSurrogate};
use super::sa::{sa_propose, SaSchedule};
use super::Visited;
use crate::baselines::{gbt_features, gbt_predict, gbt_warm_start, GbtModel, GbtParams};
use crate::error::{Error, Result};
use crate::graph::{encode, SuperGraphTemplate};
use crate::kernel::{build_knob_space, lower_to_loop_nest, KernelSpec, KnobSpace};
use crate::meta::fine_tune_head;
use crate::model::{log2_gflops, HeadParams, ModelState};
use crate::oracle::{batch_measure, Measurement, PlatformProfile};
use crate::record::TuningRecord;
use crate::rng::{derive_seed, seeded, Rng};

/// One end-to-end tuning framework under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "xgb")]
    Xgb,
    #[serde(rename = "xgb-Xfer")]
    XgbXfer,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "meta-BO")]
    MetaBo,
    #[serde(rename = "meta-BO-T")]
    MetaBoT,
    #[serde(rename = "meta-SA")]
    MetaSa,
    #[serde(rename = "meta-SA-T")]
    MetaSaT,
}

impl Arm {
    pub const ALL: [Arm; 7] = [Arm::Xgb, Arm::XgbXfer, Arm::Random, Arm::MetaBo, Arm::MetaBoT, Arm::MetaSa, Arm::MetaSaT];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Xgb => "xgb",
            Arm::XgbXfer => "xgb-Xfer",
            Arm::Random => "random",
            Arm::MetaBo => "meta-BO",
            Arm::MetaBoT => "meta-BO-T",
            Arm::MetaSa => "meta-SA",
            Arm::MetaSaT => "meta-SA-T",
        }
    }

    pub fn uses_model(self) -> bool {
        matches!(self, Arm::MetaBo | Arm::MetaBoT | Arm::MetaSa | Arm::MetaSaT)
    }

    /// Whether graphs are embedded into the super-graph template.
    pub fn augmented(self) -> bool {
        matches!(self, Arm::MetaBoT | Arm::MetaSaT)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub budget: usize,
    pub batch: usize,
    pub sa: SaSchedule,
    pub bo: BoParams,
    pub gbt: GbtParams,
    /// Weight of other kernels' samples in the transfer baseline.
    pub xfer_weight: f64,
    pub fine_tune_lr: f64,
    pub fine_tune_steps: usize,
    /// The residual GP trains on the best and the latest `gp_window / 2`
    /// measurements each.
    pub gp_window: usize,
    /// Pool entries kept, by model prediction, before GP selection.
    pub shortlist: usize,
    /// Measured configs whose ±1 neighbors join the pool.
    pub neighbor_seeds: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            budget: 1000,
            batch: 16,
            sa: SaSchedule::default(),
            bo: BoParams::default(),
            gbt: GbtParams::default(),
            xfer_weight: 0.2,
            fine_tune_lr: 0.01,
            fine_tune_steps: 20,
            gp_window: 256,
            shortlist: 128,
            neighbor_seeds: 8,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.budget < self.batch {
            return Err(Error::Config(format!("budget {} must be at least batch {} > 0", self.budget, self.batch)));
        }
        self.sa.validate()?;
        if self.bo.beta_ucb < 0.0 || self.bo.candidate_pool == 0 {
            return Err(Error::Config("beta_ucb must be >= 0 and candidate_pool > 0".into()));
        }
        Ok(())
    }
}

/// Learned inputs for the arms that need them.
#[derive(Clone, Copy, Default)]
pub struct TuneContext<'a> {
    /// Meta-trained cost model; required by meta arms.
    pub model: Option<&'a ModelState>,
    /// Template for augmented arms; all operation types when absent.
    pub template: Option<&'a SuperGraphTemplate>,
    /// Normalized samples from other kernels for the transfer baseline.
    pub prior: &'a [(Vec<f64>, f64)],
}

pub fn tune(
    spec: &KernelSpec,
    arm: Arm,
    oracle: &PlatformProfile,
    cfg: &TuneConfig,
    ctx: TuneContext<'_>,
    seed: u64,
) -> Result<TuningRecord> {
    tune_in_space(spec, &build_knob_space(spec), arm, oracle, cfg, ctx, seed)
}

/// Graph embeddings of configs under a frozen GCN, computed once per index.
struct Embedder<'a> {
    spec: &'a KernelSpec,
    space: &'a KnobSpace,
    model: &'a ModelState,
    template: Option<SuperGraphTemplate>,
    cache: HashMap<u64, Vec<f64>>,
}

impl Embedder<'_> {
    fn ensure(&mut self, idx: &[u64]) -> Result<()> {
        let mut missing: Vec<u64> = idx.iter().copied().filter(|i| !self.cache.contains_key(i)).collect();
        missing.sort_unstable();
        missing.dedup();
        let (spec, space, model, template) = (self.spec, self.space, self.model, self.template.as_ref());
        let fresh = missing
            .par_iter()
            .map(|&i| {
                let cfg = space.index_config(i)?;
                let graph = encode(&lower_to_loop_nest(spec, space, &cfg)?, template)?;
                model.embed(&graph)
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache.extend(missing.into_iter().zip(fresh));
        Ok(())
    }

    fn predict(&mut self, head: &HeadParams, idx: &[u64]) -> Result<Vec<f64>> {
        self.ensure(idx)?;
        Ok(idx.iter().map(|i| head.forward(&self.cache[i])).collect())
    }
}

fn z_scores(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, if var > 1e-12 { var.sqrt() } else { 1.0 })
}

/// Measured configs ordered best first, ties by index.
fn ranked(measured: &[(u64, Measurement)]) -> Vec<(u64, Measurement)> {
    let mut r = measured.to_vec();
    r.sort_by(|a, b| b.1.gflops.total_cmp(&a.1.gflops).then(a.0.cmp(&b.0)));
    r
}

/// Chain starts: the best measured configs for half the chains.
fn chain_starts(measured: &[(u64, Measurement)], chains: usize) -> Vec<u64> {
    ranked(measured).into_iter().filter(|(_, m)| m.feasible).take(chains / 2).map(|(i, _)| i).collect()
}

fn unit_neighbors(space: &KnobSpace, idx: u64) -> Result<Vec<u64>> {
    let cfg = space.index_config(idx)?;
    let mut out = Vec::new();
    for (k, knob) in space.knobs.iter().enumerate() {
        for d in [-1i64, 1] {
            let c = cfg.choices[k] as i64 + d;
            if (0..knob.cardinality() as i64).contains(&c) {
                let mut n = cfg.clone();
                n.choices[k] = c as u32;
                out.push(space.config_index(&n)?);
            }
        }
    }
    Ok(out)
}

/// Runs one arm on one kernel until the budget is spent. No config is
/// measured twice; infeasible results are recorded as 0 GFLOPS.
pub fn tune_in_space(
    spec: &KernelSpec,
    space: &KnobSpace,
    arm: Arm,
    oracle: &PlatformProfile,
    cfg: &TuneConfig,
    ctx: TuneContext<'_>,
    seed: u64,
) -> Result<TuningRecord> {
    cfg.validate()?;
    let mut rng = seeded(derive_seed(seed, &format!("tune|{arm}|{}", spec.signature())));
    let mut record = TuningRecord::new(spec.clone(), arm.name(), seed);
    let mut visited = Visited::new();
    let mut measured: Vec<(u64, Measurement)> = Vec::new();

    let mut embedder = match (arm.uses_model(), ctx.model) {
        (true, Some(model)) => Some(Embedder {
            spec,
            space,
            model,
            template: arm.augmented().then(|| ctx.template.cloned().unwrap_or_else(SuperGraphTemplate::all)),
            cache: HashMap::new(),
        }),
        (true, None) => return Err(Error::Config(format!("arm {arm} needs a meta-trained model"))),
        _ => None,
    };
    let mut head = ctx.model.map(|m| m.head.clone());
    let features = |i: u64| -> Result<Vec<f64>> { Ok(gbt_features(spec, space, &space.index_config(i)?)) };

    while record.len() < cfg.budget {
        let remaining_space = space.size() - visited.len() as u64;
        if remaining_space == 0 {
            break;
        }
        let want = cfg.batch.min(cfg.budget - record.len()).min(remaining_space as usize);
        let (proposal, predicted): (Vec<u64>, Vec<Option<f64>>) = match arm {
            Arm::Random => {
                let p = draw_unvisited(space, &visited, want, &mut rng);
                let n = p.len();
                (p, vec![None; n])
            }
            Arm::Xgb | Arm::XgbXfer => {
                let labels: Vec<f64> = measured.iter().map(|(_, m)| log2_gflops(m.gflops)).collect();
                let (mu, sd) = z_scores(&labels);
                let new: Vec<(Vec<f64>, f64)> = measured
                    .iter()
                    .zip(&labels)
                    .map(|((i, _), l)| Ok((features(*i)?, (l - mu) / sd)))
                    .collect::<Result<_>>()?;
                let prior = if arm == Arm::XgbXfer { ctx.prior } else { &[] };
                let model: Option<GbtModel> = if new.is_empty() && prior.is_empty() {
                    None
                } else {
                    Some(gbt_warm_start(prior, &new, &cfg.gbt, cfg.xfer_weight)?)
                };
                match model {
                    None => {
                        let p = draw_unvisited(space, &visited, want, &mut rng);
                        let n = p.len();
                        (p, vec![None; n])
                    }
                    Some(m) => {
                        let score = |idx: &[u64]| -> Result<Vec<f64>> {
                            idx.iter().map(|&i| gbt_predict(&m, &features(i)?)).collect()
                        };
                        let starts = chain_starts(&measured, cfg.sa.parallel_chains);
                        let p = sa_propose(score, space, &cfg.sa, &visited, want, &starts, &mut rng)?;
                        let pred = p
                            .iter()
                            .map(|&i| Ok(Some((gbt_predict(&m, &features(i)?)? * sd + mu).exp2())))
                            .collect::<Result<_>>()?;
                        (p, pred)
                    }
                }
            }
            Arm::MetaSa | Arm::MetaSaT => {
                let emb = embedder.as_mut().expect("meta arm has an embedder");
                let h = head.as_ref().expect("meta arm has a head");
                let starts = chain_starts(&measured, cfg.sa.parallel_chains);
                let p = sa_propose(|idx: &[u64]| emb.predict(h, idx), space, &cfg.sa, &visited, want, &starts, &mut rng)?;
                let pred = emb.predict(h, &p)?;
                (p, pred.into_iter().map(|z| Some(emb.model.label_norm.denormalize(z))).collect())
            }
            Arm::MetaBo | Arm::MetaBoT => {
                let emb = embedder.as_mut().expect("meta arm has an embedder");
                let h = head.as_ref().expect("meta arm has a head");
                let p = meta_bo_round(emb, h, space, cfg, &visited, &measured, want, &mut rng)?;
                let pred = emb.predict(h, &p)?;
                (p, pred.into_iter().map(|z| Some(emb.model.label_norm.denormalize(z))).collect())
            }
        };

        let configs = proposal.iter().map(|&i| space.index_config(i)).collect::<Result<Vec<_>>>()?;
        let results = batch_measure(spec, space, &configs, oracle)?;
        for ((&idx, m), pred) in proposal.iter().zip(results).zip(predicted) {
            if !visited.insert(idx) {
                return Err(Error::domain(format!("config {idx} proposed twice")));
            }
            record.push(idx, m, pred);
            measured.push((idx, m));
        }

        if let (Some(emb), Some(h)) = (embedder.as_mut(), head.as_mut()) {
            let idx: Vec<u64> = measured.iter().map(|(i, _)| *i).collect();
            emb.ensure(&idx)?;
            let batch: Vec<(Vec<f64>, f64)> =
                measured.iter().map(|(i, m)| (emb.cache[i].clone(), emb.model.label_norm.normalize(m.gflops))).collect();
            *h = fine_tune_head(h, &batch, cfg.fine_tune_lr, cfg.fine_tune_steps)?;
        }
    }
    Ok(record)
}

/// Pool of uniform draws plus neighbors of the best measurements, narrowed
/// by the cost model, then batch UCB with a GP on the model's residuals.
#[allow(clippy::too_many_arguments)]
fn meta_bo_round(
    emb: &mut Embedder<'_>,
    head: &HeadParams,
    space: &KnobSpace,
    cfg: &TuneConfig,
    visited: &Visited,
    measured: &[(u64, Measurement)],
    want: usize,
    rng: &mut Rng,
) -> Result<Vec<u64>> {
    let mut pool = draw_unvisited(space, visited, cfg.bo.candidate_pool, rng);
    let mut in_pool: HashSet<u64> = pool.iter().copied().collect();
    for (i, m) in ranked(measured).into_iter().take(cfg.neighbor_seeds) {
        if !m.feasible {
            continue;
        }
        for n in unit_neighbors(space, i)? {
            if !visited.contains(&n) && in_pool.insert(n) {
                pool.push(n);
            }
        }
    }
    let pred = emb.predict(head, &pool)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]).then(pool[a].cmp(&pool[b])));
    order.truncate(cfg.shortlist.max(want));

    // residual GP over a window of feasible measurements
    let feasible: Vec<(u64, Measurement)> = measured.iter().copied().filter(|(_, m)| m.feasible).collect();
    let half = cfg.gp_window / 2;
    let mut window: Vec<u64> = ranked(&feasible).into_iter().take(half).map(|(i, _)| i).collect();
    let mut in_window: HashSet<u64> = window.iter().copied().collect();
    for (i, _) in feasible.iter().rev().take(half) {
        if in_window.insert(*i) {
            window.push(*i);
        }
    }
    let gflops: HashMap<u64, f64> = feasible.iter().map(|(i, m)| (*i, m.gflops)).collect();
    let wpred = emb.predict(head, &window)?;
    let resid: Vec<f64> =
        window.iter().zip(&wpred).map(|(i, p)| emb.model.label_norm.normalize(gflops[i]) - p).collect();
    let (rm, rs) = z_scores(&resid);
    let x = window.iter().map(|&i| space.index_config(i).map(|c| space.coordinates(&c))).collect::<Result<Vec<_>>>()?;
    let y = resid.iter().map(|r| (r - rm) / rs).collect();
    let mut gp = GpSurrogate::new(space.knobs.len()).with_observations(x, y);
    gp.noise_variance = 1e-4;
    let gp = gp_fit(&gp)?;

    let cands: Vec<u64> = order.iter().map(|&o| pool[o]).collect();
    let coords = cands.iter().map(|&i| space.index_config(i).map(|c| space.coordinates(&c))).collect::<Result<Vec<_>>>()?;
    let offset: Vec<f64> = order.iter().map(|&o| (pred[o] + rm) / rs).collect();
    let picks = ucb_select(&gp, &coords, Some(&offset), want, cfg.bo.beta_ucb)?;
    Ok(picks.into_iter().map(|p| cands[p]).collect())
}

/// Plain batch BO: a GP over knob coordinates of the measured configs
/// (feasible only, z-scored log2 GFLOPS) selecting each batch by UCB.
pub fn bo_search(
    spec: &KernelSpec,
    space: &KnobSpace,
    oracle: &PlatformProfile,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuningRecord> {
    cfg.validate()?;
    let mut rng = seeded(derive_seed(seed, &format!("tune|BO|{}", spec.signature())));
    let mut record = TuningRecord::new(spec.clone(), "BO", seed);
    let mut visited = Visited::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut gp = GpSurrogate::new(space.knobs.len());
    while record.len() < cfg.budget && (visited.len() as u64) < space.size() {
        let want = cfg.batch.min(cfg.budget - record.len());
        let proposal = bo_propose_batch(&gp, space, want, &cfg.bo, &visited, &mut rng)?;
        let configs = proposal.iter().map(|&i| space.index_config(i)).collect::<Result<Vec<_>>>()?;
        for ((&idx, m), c) in proposal.iter().zip(batch_measure(spec, space, &configs, oracle)?).zip(&configs) {
            visited.insert(idx);
            record.push(idx, m, None);
            if m.feasible {
                xs.push(space.coordinates(c));
                ys.push(log2_gflops(m.gflops));
            }
        }
        let (mu, sd) = z_scores(&ys);
        let y = ys.iter().map(|v| (v - mu) / sd).collect();
        gp = gp_fit(&GpSurrogate::new(space.knobs.len()).with_observations(xs.clone(), y))?;
    }
    Ok(record)
}
