//! Prediction error, search quality and aggregation over tuning records.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::log2_gflops;
use crate::record::TuningRecord;

/// Metrics of one (arm, kernel, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub arm: String,
    pub kernel: String,
    pub seed: u64,
    pub final_best: f64,
    pub normalized_to_xgb: Option<f64>,
    pub mse: Option<f64>,
    pub mse_d: Option<f64>,
    pub iterations_to_xgb_best: Option<usize>,
}

/// Mean squared error between predicted and measured GFLOPS on the floored
/// log2 scale.
pub fn mse(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(|(p, m)| (log2_gflops(*p) - log2_gflops(*m)).powi(2)).sum::<f64>() / pairs.len() as f64)
}

/// [`mse`] over the `ceil(n/4)` pairs with the highest measurements; ties
/// keep the earlier pair.
pub fn mse_d(pairs: &[(f64, f64)]) -> Option<f64> {
    let top = top_quarter(pairs);
    mse(&top)
}

pub fn top_quarter(pairs: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].1.total_cmp(&pairs[a].1).then(a.cmp(&b)));
    order.truncate(pairs.len().div_ceil(4));
    order.into_iter().map(|i| pairs[i]).collect()
}

/// First 1-based iteration whose running best reaches `target`.
pub fn iterations_to_reach(record: &TuningRecord, target: f64) -> Option<usize> {
    record.entries.iter().find(|e| e.best_gflops >= target).map(|e| e.iteration)
}

/// `xgb_best` is the final best of the paired xgb run, when there is one.
pub fn compute_metrics(record: &TuningRecord, xgb_best: Option<f64>) -> MetricsEntry {
    let pairs: Vec<(f64, f64)> =
        record.entries.iter().filter_map(|e| e.predicted_gflops.map(|p| (p, e.measured_gflops))).collect();
    let best = record.best();
    MetricsEntry {
        arm: record.provenance.arm.clone(),
        kernel: record.provenance.spec.signature(),
        seed: record.provenance.seed,
        final_best: best,
        normalized_to_xgb: xgb_best.filter(|b| *b > 0.0).map(|b| best / b),
        mse: mse(&pairs),
        mse_d: mse_d(&pairs),
        iterations_to_xgb_best: xgb_best.and_then(|b| iterations_to_reach(record, b)),
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed aggregate of one (arm, kernel) pair. A run that never reaches the
/// xgb best counts as budget + 1 iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: String,
    pub kernel: String,
    pub runs: usize,
    pub mean_best: f64,
    pub median_best: f64,
    pub median_normalized_to_xgb: Option<f64>,
    pub mean_mse: Option<f64>,
    pub mean_mse_d: Option<f64>,
    pub median_iterations_to_xgb_best: Option<f64>,
}

/// Pooled over every kernel and seed of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub cells: usize,
    pub median_normalized_to_xgb: Option<f64>,
    pub median_iterations_to_xgb_best: Option<f64>,
    pub mean_mse: Option<f64>,
    pub mean_mse_d: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricsEntry>,
    pub aggregates: Vec<Aggregate>,
}

impl MetricsReport {
    pub fn from_entries(entries: Vec<MetricsEntry>, budget: usize) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<&MetricsEntry>> = BTreeMap::new();
        for e in &entries {
            groups.entry((e.arm.clone(), e.kernel.clone())).or_default().push(e);
        }
        let aggregates = groups
            .into_iter()
            .map(|((arm, kernel), es)| {
                let best: Vec<f64> = es.iter().map(|e| e.final_best).collect();
                let norm: Vec<f64> = es.iter().filter_map(|e| e.normalized_to_xgb).collect();
                let mses: Vec<f64> = es.iter().filter_map(|e| e.mse).collect();
                let mse_ds: Vec<f64> = es.iter().filter_map(|e| e.mse_d).collect();
                let paired = es.iter().any(|e| e.normalized_to_xgb.is_some());
                let iters: Vec<f64> = es
                    .iter()
                    .map(|e| e.iterations_to_xgb_best.map_or(budget as f64 + 1.0, |i| i as f64))
                    .collect();
                Aggregate {
                    arm,
                    kernel,
                    runs: es.len(),
                    mean_best: mean(&best).unwrap_or(0.0),
                    median_best: median(&best).unwrap_or(0.0),
                    median_normalized_to_xgb: median(&norm),
                    mean_mse: mean(&mses),
                    mean_mse_d: mean(&mse_ds),
                    median_iterations_to_xgb_best: if paired { median(&iters) } else { None },
                }
            })
            .collect();
        MetricsReport { entries, aggregates }
    }

    /// One row per arm in first-seen order; unreached xgb bests count as
    /// budget + 1 iterations.
    pub fn arm_summaries(&self, budget: usize) -> Vec<ArmSummary> {
        let mut arms: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !arms.contains(&e.arm.as_str()) {
                arms.push(&e.arm);
            }
        }
        arms.into_iter()
            .map(|arm| {
                let es: Vec<&MetricsEntry> = self.entries_for(arm).collect();
                let norm: Vec<f64> = es.iter().filter_map(|e| e.normalized_to_xgb).collect();
                let paired = !norm.is_empty();
                let iters: Vec<f64> =
                    es.iter().map(|e| e.iterations_to_xgb_best.map_or(budget as f64 + 1.0, |i| i as f64)).collect();
                ArmSummary {
                    arm: arm.to_string(),
                    cells: es.len(),
                    median_normalized_to_xgb: median(&norm),
                    median_iterations_to_xgb_best: if paired { median(&iters) } else { None },
                    mean_mse: mean(&es.iter().filter_map(|e| e.mse).collect::<Vec<_>>()),
                    mean_mse_d: mean(&es.iter().filter_map(|e| e.mse_d).collect::<Vec<_>>()),
                }
            })
            .collect()
    }

    pub fn read_entries_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsEntry>> {
        let entries = csv::Reader::from_reader(r).deserialize().collect::<std::result::Result<Vec<MetricsEntry>, _>>()?;
        Ok(entries)
    }

    pub fn write_summary_csv<W: Write>(&self, budget: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for a in self.arm_summaries(budget) {
            out.serialize(a)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn entries_for<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a MetricsEntry> + 'a {
        self.entries.iter().filter(move |e| e.arm == arm)
    }

    pub fn write_entries_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for a in &self.aggregates {
            out.serialize(a)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Best-so-far curves per (arm, kernel): mean, min and max over seeds at
/// every iteration, as CSV.
pub fn write_plot_data<W: Write>(records: &[TuningRecord], w: W) -> Result<()> {
    let mut groups: BTreeMap<(String, String), Vec<&TuningRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.provenance.arm.clone(), r.provenance.spec.signature())).or_default().push(r);
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["arm", "kernel", "iteration", "mean_best", "min_best", "max_best"])?;
    for ((arm, kernel), rs) in groups {
        let len = rs.iter().map(|r| r.len()).max().unwrap_or(0);
        for it in 0..len {
            let v: Vec<f64> = rs.iter().filter_map(|r| r.entries.get(it).map(|e| e.best_gflops)).collect();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.write_record([
                arm.clone(),
                kernel.clone(),
                (it + 1).to_string(),
                mean(&v).unwrap_or(0.0).to_string(),
                lo.to_string(),
                hi.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Time of a kernel bundle in milliseconds when each kernel runs at its
/// best found throughput.
pub fn bundle_time_ms(bests: &[(f64, f64)]) -> f64 {
    bests.iter().map(|(flops, gflops)| if *gflops > 0.0 { flops / (gflops * 1e6) } else { f64::INFINITY }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelSpec, OpType};
    use crate::oracle::Measurement;

    fn record(values: &[f64]) -> TuningRecord {
        let spec = KernelSpec { op_type: OpType::Conv2d, input_size: 8, in_channels: 4, out_channels: 4, kernel_size: 3, stride: 1, padding: 1 };
        let mut r = TuningRecord::new(spec, "meta-BO", 0);
        for (i, &v) in values.iter().enumerate() {
            r.push(i as u64, Measurement { gflops: v, feasible: v > 0.0 }, Some(v));
        }
        r
    }

    #[test]
    fn exact_predictions_have_zero_error() {
        let m = compute_metrics(&record(&[1.0, 5.0, 3.0]), None);
        assert_eq!((m.mse, m.mse_d), (Some(0.0), Some(0.0)));
        assert_eq!(m.iterations_to_xgb_best, None);
    }

    #[test]
    fn top_quarter_of_four_is_the_best_one() {
        let pairs = [(2.0, 1.0), (2.0, 2.0), (2.0, 3.0), (2.0, 4.0)];
        assert_eq!(top_quarter(&pairs), vec![(2.0, 4.0)]);
        assert_eq!(mse_d(&pairs), Some(1.0));
    }

    #[test]
    fn constant_curve_reaches_at_first_iteration() {
        let r = record(&[4.0, 4.0, 4.0]);
        assert_eq!(iterations_to_reach(&r, 4.0), Some(1));
        assert_eq!(compute_metrics(&r, Some(4.0)).normalized_to_xgb, Some(1.0));
    }

    #[test]
    fn unreached_target_counts_past_budget() {
        let r = record(&[1.0, 2.0]);
        let e = compute_metrics(&r, Some(10.0));
        let rep = MetricsReport::from_entries(vec![e], 2);
        assert_eq!(rep.aggregates[0].median_iterations_to_xgb_best, Some(3.0));
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
    }
}
