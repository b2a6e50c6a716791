//! Command-line front end. Every subcommand reads an experiment plan (TOML,
//! all fields optional) and writes CSV outputs plus `manifest.json` into
//! `--out`. Later stages pick up earlier artifacts from the same directory.

use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::graph::SuperGraphTemplate;
use crate::harness::dataset::{gen_dataset, Dataset};
use crate::harness::experiment::{build_inputs, run_experiment, ExperimentInputs, ExperimentPlan};
use crate::harness::metrics::MetricsReport;
use crate::harness::RunManifest;
use crate::meta::{dataset_loss, meta_train, pretrain, LabeledSample};
use crate::model::ModelState;
use crate::rng::{content_hash, derive_seed, seeded};
use crate::search::Arm;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "graphtune", version, about = "Meta-learned cost models and knob search for convolution auto-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment plan (TOML). Defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Restrict to one arm (xgb, xgb-Xfer, random, meta-BO, meta-BO-T, meta-SA, meta-SA-T).
    #[arg(long)]
    pub arm: Option<Arm>,
    /// Platform profile (platform-A, platform-B or a profile TOML file): the
    /// labelling platform for gen-dataset, the tuning platform otherwise.
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample training kernels and measure random configs of each.
    GenDataset(Common),
    /// Supervised pre-training of the cost model on the dataset.
    Pretrain(Common),
    /// Meta-train the pre-trained model.
    Metatrain(Common),
    /// Tune the plan's kernels with one arm and one seed.
    Tune(Common),
    /// Run every arm, kernel and seed of the plan and compute metrics.
    Compare(Common),
    /// Recompute arm summaries from a finished compare run.
    Report(Common),
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenDataset(c) => gen_dataset_cmd(&c),
        Command::Pretrain(c) => pretrain_cmd(&c),
        Command::Metatrain(c) => metatrain_cmd(&c),
        Command::Tune(c) => tune_cmd(&c),
        Command::Compare(c) => compare_cmd(&c),
        Command::Report(c) => report_cmd(&c),
    }
}

fn load_plan(c: &Common) -> Result<ExperimentPlan> {
    let mut plan = match &c.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config {} not found", p.display()))),
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::default(),
    };
    if let Some(p) = &c.profile {
        plan.profile = p.clone();
    }
    if let Some(arm) = c.arm {
        plan.arms = vec![arm];
    }
    plan.validate()?;
    Ok(plan)
}

fn variants(plan: &ExperimentPlan) -> Vec<&'static str> {
    let mut v = Vec::new();
    if plan.arms.iter().any(|a| a.uses_model() && !a.augmented()) {
        v.push("raw");
    }
    if plan.arms.iter().any(|a| a.augmented()) {
        v.push("augmented");
    }
    v
}

fn dataset_path(plan: &ExperimentPlan, out: &Path) -> PathBuf {
    plan.checkpoints.dataset.clone().unwrap_or_else(|| out.join("dataset.csv"))
}

fn load_dataset(plan: &ExperimentPlan, out: &Path) -> Result<Dataset> {
    let p = dataset_path(plan, out);
    if !p.exists() {
        return Err(Error::Config(format!("dataset {} not found; run gen-dataset first", p.display())));
    }
    Dataset::load(&p)
}

fn samples_for(ds: &Dataset, variant: &str) -> Result<Vec<LabeledSample>> {
    match variant {
        "augmented" => ds.samples(Some(&SuperGraphTemplate::all())),
        _ => ds.samples(None),
    }
}

fn manifest(command: &str, plan: &ExperimentPlan, seeds: Vec<u64>, out: &Path, artifacts: Vec<PathBuf>) -> Result<()> {
    let arms = plan.arms.iter().map(|a| a.name().to_string()).collect();
    RunManifest::new(command, arms, seeds, plan.content_hash(), artifacts).save(&out.join("manifest.json"))
}

fn gen_dataset_cmd(c: &Common) -> Result<()> {
    let mut plan = load_plan(c)?;
    if let Some(p) = &c.profile {
        plan.dataset.profile = p.clone();
    }
    let seed = c.seed.unwrap_or(plan.dataset_seed);
    std::fs::create_dir_all(&c.out)?;
    let ds = gen_dataset(&plan.dataset, &mut seeded(seed))?;
    ds.save(&c.out.join("dataset.csv"))?;
    log::info!("{} classes, {} rows, hash {}", ds.classes.len(), ds.rows.len(), ds.content_hash());
    manifest("gen-dataset", &plan, vec![seed], &c.out, vec!["dataset.csv".into()])
}

fn pretrain_cmd(c: &Common) -> Result<()> {
    let mut plan = load_plan(c)?;
    if let Some(s) = c.seed {
        plan.meta.seed = s;
    }
    let ds = load_dataset(&plan, &c.out)?;
    let mut summary = csv::Writer::from_path(c.out.join("pretrain.csv"))?;
    summary.write_record(["variant", "samples", "loss"])?;
    let mut artifacts = vec![PathBuf::from("pretrain.csv")];
    for v in variants(&plan) {
        let samples = samples_for(&ds, v)?;
        let mut rng = seeded(derive_seed(plan.meta.seed, &format!("pretrain|{v}")));
        let model = pretrain(&samples, &plan.meta, &mut rng)?;
        let loss = dataset_loss(&model, &samples)?;
        let name = format!("pretrained_{v}.ckpt");
        model.save(&c.out.join(&name))?;
        summary.write_record([v.to_string(), samples.len().to_string(), loss.to_string()])?;
        log::info!("pretrained {v}: loss {loss:.4}");
        artifacts.push(name.into());
    }
    summary.flush()?;
    manifest("pretrain", &plan, vec![plan.meta.seed], &c.out, artifacts)
}

fn metatrain_cmd(c: &Common) -> Result<()> {
    let mut plan = load_plan(c)?;
    if let Some(s) = c.seed {
        plan.meta.seed = s;
    }
    let ds = load_dataset(&plan, &c.out)?;
    let mut artifacts = Vec::new();
    for v in variants(&plan) {
        let pre = c.out.join(format!("pretrained_{v}.ckpt"));
        if !pre.exists() {
            return Err(Error::Config(format!("{} not found; run pretrain first", pre.display())));
        }
        let model = ModelState::load(&pre)?;
        let samples = samples_for(&ds, v)?;
        let mut rng = seeded(derive_seed(plan.meta.seed, &format!("metatrain|{v}")));
        let log_name = format!("metatrain_{v}.csv");
        let mut log = File::create(c.out.join(&log_name))?;
        let (trained, history) = meta_train(&model, &samples, &plan.meta, &mut rng, Some(&mut log))?;
        let name = format!("meta_{v}.ckpt");
        trained.save(&c.out.join(&name))?;
        if let Some(last) = history.last() {
            log::info!("meta-trained {v}: final query loss {:.4}", last.query_loss);
        }
        artifacts.extend([PathBuf::from(log_name), PathBuf::from(name)]);
    }
    manifest("metatrain", &plan, vec![plan.meta.seed], &c.out, artifacts)
}

/// Points unset checkpoints at artifacts of earlier stages in `out`.
fn fill_checkpoints(plan: &mut ExperimentPlan, out: &Path) {
    let cp = &mut plan.checkpoints;
    let found = |name: &str| Some(out.join(name)).filter(|p| p.exists());
    cp.raw = cp.raw.take().or_else(|| found("meta_raw.ckpt"));
    cp.augmented = cp.augmented.take().or_else(|| found("meta_augmented.ckpt"));
    cp.dataset = cp.dataset.take().or_else(|| found("dataset.csv"));
}

fn inputs_for(plan: &ExperimentPlan) -> Result<ExperimentInputs> {
    match ExperimentInputs::load(plan) {
        Ok(i) => Ok(i),
        Err(Error::Config(msg)) if plan.checkpoints.raw.is_none() && plan.checkpoints.augmented.is_none() => {
            log::info!("{msg}; training inputs in memory");
            build_inputs(plan)
        }
        Err(e) => Err(e),
    }
}

fn tune_cmd(c: &Common) -> Result<()> {
    let arm = c.arm.ok_or_else(|| Error::Config("tune needs --arm".into()))?;
    let mut plan = load_plan(c)?;
    plan.seeds = vec![c.seed.unwrap_or(0)];
    fill_checkpoints(&mut plan, &c.out);
    let inputs = inputs_for(&plan)?;
    let dir = c.out.join(format!("tune_{}_{}", arm.name(), plan.seeds[0]));
    std::fs::create_dir_all(&dir)?;
    let report = run_experiment(&plan, &inputs, Some(&dir))?;
    for e in &report.entries {
        println!("{}\t{}\tseed {}\tbest {:.1} GFLOPS", e.arm, e.kernel, e.seed, e.final_best);
    }
    let mut m = RunManifest::load(&dir.join("manifest.json"))?;
    m.command = "tune".into();
    m.save(&dir.join("manifest.json"))
}

fn compare_cmd(c: &Common) -> Result<()> {
    let mut plan = load_plan(c)?;
    if let Some(s) = c.seed {
        plan.seeds = (s..s + plan.seeds.len() as u64).collect();
    }
    fill_checkpoints(&mut plan, &c.out);
    let inputs = inputs_for(&plan)?;
    let dir = c.out.join("compare");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("plan.toml"), toml::to_string(&plan).map_err(|e| Error::Config(e.to_string()))?)?;
    let report = run_experiment(&plan, &inputs, Some(&dir))?;
    print_summary(&report, plan.budget);
    Ok(())
}

fn report_cmd(c: &Common) -> Result<()> {
    let dir = c.out.join("compare");
    let plan_path = dir.join("plan.toml");
    let plan = match &c.config {
        Some(_) => load_plan(c)?,
        None if plan_path.exists() => ExperimentPlan::load(&plan_path)?,
        None => ExperimentPlan::default(),
    };
    let metrics = dir.join("metrics.csv");
    if !metrics.exists() {
        return Err(Error::Config(format!("{} not found; run compare first", metrics.display())));
    }
    let mut entries = MetricsReport::read_entries_csv(File::open(&metrics)?)?;
    if let Some(arm) = c.arm {
        entries.retain(|e| e.arm == arm.name());
    }
    let report = MetricsReport::from_entries(entries, plan.budget);
    report.write_summary_csv(plan.budget, File::create(dir.join("report.csv"))?)?;
    print_summary(&report, plan.budget);
    let hash = content_hash(&std::fs::read(&metrics)?);
    let arms = report.arm_summaries(plan.budget).into_iter().map(|a| a.arm).collect();
    RunManifest::new("report", arms, plan.seeds.clone(), hash, vec!["report.csv".into()]).save(&dir.join("report_manifest.json"))
}

fn print_summary(report: &MetricsReport, budget: usize) {
    let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    println!("{:<10} {:>6} {:>10} {:>10} {:>9} {:>9}", "arm", "cells", "best/xgb", "iters", "mse", "mse_d");
    for a in report.arm_summaries(budget) {
        println!(
            "{:<10} {:>6} {:>10} {:>10} {:>9} {:>9}",
            a.arm,
            a.cells,
            fmt(a.median_normalized_to_xgb, 4),
            fmt(a.median_iterations_to_xgb_best, 1),
            fmt(a.mean_mse, 4),
            fmt(a.mean_mse_d, 4)
        );
    }
}
