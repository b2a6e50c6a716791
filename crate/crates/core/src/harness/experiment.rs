//! Experiment plans: which arms run on which kernels and seeds, the trained
//! inputs they need, and the artifacts a run leaves behind.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{check_held_out, held_out_kernels, Dataset, DatasetParams};
use super::metrics::{bundle_time_ms, compute_metrics, write_plot_data, MetricsReport};
use super::RunManifest;
use crate::baselines::gbt_features;
use crate::error::{Error, Result};
use crate::graph::SuperGraphTemplate;
use crate::kernel::{build_knob_space, KernelSpec};
use crate::meta::{meta_train, pretrain, LabeledSample, MetaConfig, StepLoss};
use crate::model::{log2_gflops, ModelState};
use crate::oracle::PlatformProfile;
use crate::record::{Provenance, TuningRecord};
use crate::rng::{content_hash, derive_seed, seeded};
use crate::search::{tune, Arm, TuneConfig, TuneContext};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Checkpoints {
    /// Model meta-trained on raw graphs, used by meta-BO and meta-SA.
    pub raw: Option<PathBuf>,
    /// Model meta-trained on augmented graphs, used by the -T arms.
    pub augmented: Option<PathBuf>,
    /// Training dataset CSV; needed by xgb-Xfer and the held-out check.
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub arms: Vec<Arm>,
    pub kernels: Vec<KernelSpec>,
    /// Profile measured during tuning.
    pub profile: String,
    pub budget: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub dataset: DatasetParams,
    pub dataset_seed: u64,
    pub meta: MetaConfig,
    pub tune: TuneConfig,
    /// Cap on other-kernel samples given to the transfer baseline.
    pub prior_cap: usize,
    pub checkpoints: Checkpoints,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            arms: vec![Arm::Xgb, Arm::MetaBo, Arm::MetaBoT],
            kernels: held_out_kernels(),
            profile: "platform-A".into(),
            budget: 1000,
            batch: 16,
            seeds: (0..10).collect(),
            dataset: DatasetParams::default(),
            dataset_seed: 0,
            meta: MetaConfig::default(),
            tune: TuneConfig::default(),
            prior_cap: 2000,
            checkpoints: Checkpoints::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.kernels.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one arm, kernel and seed".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("plan seeds must be distinct".into()));
        }
        for k in &self.kernels {
            k.validate().map_err(|e| Error::Config(format!("kernel {}: {e}", k.signature())))?;
        }
        PlatformProfile::resolve(&self.profile)?;
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.tune_config().validate()
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig { budget: self.budget, batch: self.batch, ..self.tune.clone() }
    }

    pub fn content_hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("plan serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: ExperimentPlan = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Trained artifacts consumed by the arms.
#[derive(Clone, Debug, Default)]
pub struct ExperimentInputs {
    pub raw_model: Option<ModelState>,
    pub augmented_model: Option<ModelState>,
    pub dataset: Option<Dataset>,
}

impl ExperimentInputs {
    /// Loads what the plan's arms need; a missing artifact names the arm.
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        let mut inputs = ExperimentInputs::default();
        let need = |arm: &Arm, path: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
            match path {
                Some(p) if p.exists() => Ok(p.clone()),
                Some(p) => Err(Error::Config(format!("arm {arm}: {what} {} not found", p.display()))),
                None => Err(Error::Config(format!("arm {arm}: no {what} configured"))),
            }
        };
        for arm in &plan.arms {
            match arm {
                Arm::MetaBo | Arm::MetaSa if inputs.raw_model.is_none() => {
                    inputs.raw_model = Some(ModelState::load(&need(arm, &plan.checkpoints.raw, "checkpoint")?)?);
                }
                Arm::MetaBoT | Arm::MetaSaT if inputs.augmented_model.is_none() => {
                    inputs.augmented_model = Some(ModelState::load(&need(arm, &plan.checkpoints.augmented, "checkpoint")?)?);
                }
                Arm::XgbXfer if inputs.dataset.is_none() => {
                    inputs.dataset = Some(Dataset::load(&need(arm, &plan.checkpoints.dataset, "dataset")?)?);
                }
                _ => {}
            }
        }
        if inputs.dataset.is_none() {
            if let Some(p) = plan.checkpoints.dataset.as_ref().filter(|p| p.exists()) {
                inputs.dataset = Some(Dataset::load(p)?);
            }
        }
        Ok(inputs)
    }

    fn model_for(&self, arm: Arm) -> Result<Option<&ModelState>> {
        let m = match arm {
            Arm::MetaBo | Arm::MetaSa => self.raw_model.as_ref(),
            Arm::MetaBoT | Arm::MetaSaT => self.augmented_model.as_ref(),
            _ => return Ok(None),
        };
        m.map(Some).ok_or_else(|| Error::Config(format!("arm {arm}: no meta-trained model")))
    }
}

/// Pre-training followed by meta-training on one dataset variant.
pub fn train_model(samples: &[LabeledSample], cfg: &MetaConfig, label: &str) -> Result<(ModelState, Vec<StepLoss>)> {
    let mut rng = seeded(derive_seed(cfg.seed, &format!("pretrain|{label}")));
    let pre = pretrain(samples, cfg, &mut rng)?;
    let mut rng = seeded(derive_seed(cfg.seed, &format!("metatrain|{label}")));
    meta_train(&pre, samples, cfg, &mut rng, None)
}

/// Generates the dataset and trains both model variants in memory.
pub fn build_inputs(plan: &ExperimentPlan) -> Result<ExperimentInputs> {
    let dataset = super::dataset::gen_dataset(&plan.dataset, &mut seeded(plan.dataset_seed))?;
    let mut inputs = ExperimentInputs { dataset: Some(dataset), ..Default::default() };
    let ds = inputs.dataset.as_ref().expect("just set");
    if plan.arms.iter().any(|a| matches!(a, Arm::MetaBo | Arm::MetaSa)) {
        inputs.raw_model = Some(train_model(&ds.samples(None)?, &plan.meta, "raw")?.0);
    }
    if plan.arms.iter().any(|a| a.augmented()) {
        let template = SuperGraphTemplate::all();
        inputs.augmented_model = Some(train_model(&ds.samples(Some(&template))?, &plan.meta, "augmented")?.0);
    }
    Ok(inputs)
}

/// Knob features and per-class normalized labels of dataset rows, evenly
/// thinned to at most `cap` samples.
pub fn transfer_prior(dataset: &Dataset, cap: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut stats: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &dataset.rows {
        stats.entry(r.class).or_default().push(log2_gflops(r.gflops));
    }
    let norm: BTreeMap<usize, (f64, f64)> = stats
        .into_iter()
        .map(|(c, v)| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            (c, (m, if sd > 1e-12 { sd } else { 1.0 }))
        })
        .collect();
    let spaces: Vec<_> = dataset.classes.iter().map(build_knob_space).collect();
    let n = dataset.rows.len();
    let take = cap.min(n);
    (0..take)
        .map(|k| {
            let r = &dataset.rows[k * n / take];
            let (m, sd) = norm[&r.class];
            let space = &spaces[r.class];
            let f = gbt_features(&dataset.classes[r.class], space, &space.index_config(r.config_index)?);
            Ok((f, (log2_gflops(r.gflops) - m) / sd))
        })
        .collect()
}

fn cell_name(arm: Arm, spec: &KernelSpec, seed: u64) -> String {
    format!("{}__{}__{}", arm.name(), spec.signature(), seed)
}

/// Runs every (arm, kernel, seed) cell. With `out`, records are written
/// under `out/records` and cells whose inputs hash unchanged are loaded
/// instead of rerun; metrics, plot data, bundle times and a manifest follow.
pub fn run_experiment(plan: &ExperimentPlan, inputs: &ExperimentInputs, out: Option<&Path>) -> Result<MetricsReport> {
    plan.validate()?;
    if let Some(ds) = &inputs.dataset {
        check_held_out(ds, &plan.kernels)?;
    }
    for &arm in &plan.arms {
        inputs.model_for(arm)?;
        if arm == Arm::XgbXfer && inputs.dataset.is_none() {
            return Err(Error::Config(format!("arm {arm}: no training dataset for the transfer prior")));
        }
    }
    let profile = PlatformProfile::resolve(&plan.profile)?;
    let cfg = plan.tune_config();
    let prior = match &inputs.dataset {
        Some(ds) if plan.arms.contains(&Arm::XgbXfer) => transfer_prior(ds, plan.prior_cap)?,
        _ => Vec::new(),
    };
    let model_hash = |arm: Arm| -> String {
        match inputs.model_for(arm).ok().flatten() {
            Some(m) => content_hash(&m.to_checkpoint_bytes()),
            None if arm == Arm::XgbXfer => content_hash(&serde_json::to_vec(&prior).expect("prior serializes")),
            None => String::new(),
        }
    };
    let record_dir = out.map(|o| o.join("records"));
    if let Some(d) = &record_dir {
        std::fs::create_dir_all(d)?;
    }
    let cells: Vec<(Arm, KernelSpec, u64)> = plan
        .kernels
        .iter()
        .flat_map(|k| plan.seeds.iter().flat_map(move |&s| plan.arms.iter().map(move |&a| (a, k.clone(), s))))
        .collect();
    let hashes: BTreeMap<Arm, String> = plan.arms.iter().map(|&a| (a, model_hash(a))).collect();
    let records = cells
        .par_iter()
        .map(|(arm, spec, seed)| -> Result<TuningRecord> {
            let cell_hash = content_hash(
                serde_json::json!({
                    "arm": arm, "spec": spec, "seed": seed, "profile": profile, "tune": cfg, "inputs": hashes[arm],
                })
                .to_string()
                .as_bytes(),
            );
            let paths = record_dir.as_ref().map(|d| {
                let name = cell_name(*arm, spec, *seed);
                (d.join(format!("{name}.csv")), d.join(format!("{name}.hash")))
            });
            if let Some((csv, hash)) = &paths {
                if std::fs::read_to_string(hash).map(|h| h.trim() == cell_hash).unwrap_or(false) {
                    let prov = Provenance { spec: spec.clone(), arm: arm.name().to_string(), seed: *seed };
                    if let Ok(r) = TuningRecord::load_csv(csv, prov) {
                        log::info!("skipping completed cell {}", cell_name(*arm, spec, *seed));
                        return Ok(r);
                    }
                }
            }
            let ctx = TuneContext { model: inputs.model_for(*arm)?, template: None, prior: &prior };
            let record = tune(spec, *arm, &profile, &cfg, ctx, *seed)?;
            if let Some((csv, hash)) = &paths {
                record.save_csv(csv)?;
                std::fs::write(hash, &cell_hash)?;
            }
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;

    let xgb_best: BTreeMap<(String, u64), f64> = records
        .iter()
        .filter(|r| r.provenance.arm == Arm::Xgb.name())
        .map(|r| ((r.provenance.spec.signature(), r.provenance.seed), r.best()))
        .collect();
    let entries = records
        .iter()
        .map(|r| compute_metrics(r, xgb_best.get(&(r.provenance.spec.signature(), r.provenance.seed)).copied()))
        .collect();
    let report = MetricsReport::from_entries(entries, plan.budget);

    if let Some(out) = out {
        let mut artifacts: Vec<PathBuf> = cells
            .iter()
            .map(|(a, k, s)| PathBuf::from("records").join(format!("{}.csv", cell_name(*a, k, *s))))
            .collect();
        report.write_entries_csv(std::fs::File::create(out.join("metrics.csv"))?)?;
        report.write_aggregates_csv(std::fs::File::create(out.join("metrics_summary.csv"))?)?;
        report.write_summary_csv(plan.budget, std::fs::File::create(out.join("arm_summary.csv"))?)?;
        write_plot_data(&records, std::fs::File::create(out.join("plot_data.csv"))?)?;
        write_bundle_times(&records, &out.join("bundle.csv"))?;
        artifacts.extend(["metrics.csv", "metrics_summary.csv", "arm_summary.csv", "plot_data.csv", "bundle.csv"].map(PathBuf::from));
        RunManifest::new("compare", plan.arms.iter().map(|a| a.name().to_string()).collect(), plan.seeds.clone(), plan.content_hash(), artifacts)
            .save(&out.join("manifest.json"))?;
    }
    Ok(report)
}

/// Kernel bundle time per (arm, seed), also relative to xgb when present.
fn write_bundle_times(records: &[TuningRecord], path: &Path) -> Result<()> {
    let mut times: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        times.entry((r.provenance.arm.clone(), r.provenance.seed)).or_default().push((r.provenance.spec.flops(), r.best()));
    }
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["arm", "seed", "bundle_time_ms", "relative_to_xgb"])?;
    for ((arm, seed), v) in &times {
        let t = bundle_time_ms(v);
        let rel = times.get(&(Arm::Xgb.name().to_string(), *seed)).map(|x| t / bundle_time_ms(x));
        out.write_record([arm.clone(), seed.to_string(), t.to_string(), rel.map(|r| r.to_string()).unwrap_or_default()])?;
    }
    out.flush()?;
    Ok(())
}
