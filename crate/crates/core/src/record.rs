//! Per-run measurement log shared by every tuning arm.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::oracle::Measurement;

/// One measured configuration. `iteration` counts measurements from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub iteration: usize,
    pub config_index: u64,
    pub measured_gflops: f64,
    pub predicted_gflops: Option<f64>,
    pub best_gflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: KernelSpec,
    pub arm: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub provenance: Provenance,
    pub entries: Vec<TrialEntry>,
}

impl TuningRecord {
    pub fn new(spec: KernelSpec, arm: impl Into<String>, seed: u64) -> Self {
        TuningRecord { provenance: Provenance { spec, arm: arm.into(), seed }, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.best_gflops)
    }

    pub fn push(&mut self, config_index: u64, m: Measurement, predicted_gflops: Option<f64>) {
        let best = self.best().max(m.gflops);
        self.entries.push(TrialEntry {
            iteration: self.entries.len() + 1,
            config_index,
            measured_gflops: m.gflops,
            predicted_gflops,
            best_gflops: best,
        });
    }

    pub fn best_curve(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.best_gflops).collect()
    }

    /// Checks numbering and the running-maximum column.
    pub fn validate(&self) -> Result<()> {
        let mut best = 0.0f64;
        for (i, e) in self.entries.iter().enumerate() {
            if e.iteration != i + 1 {
                return Err(Error::Parse(format!("row {i}: iteration {} out of sequence", e.iteration)));
            }
            if !(e.measured_gflops >= 0.0) {
                return Err(Error::Parse(format!("row {i}: negative or NaN measurement")));
            }
            best = best.max(e.measured_gflops);
            if e.best_gflops != best {
                return Err(Error::Parse(format!("row {i}: best_gflops {} is not the running maximum {best}", e.best_gflops)));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.entries.is_empty() {
            out.write_record(["iteration", "config_index", "measured_gflops", "predicted_gflops", "best_gflops"])?;
        }
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the entry rows; provenance lives outside the CSV.
    pub fn read_entries<R: Read>(r: R) -> Result<Vec<TrialEntry>> {
        let mut rdr = csv::Reader::from_reader(r);
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<TrialEntry>, _>>()?;
        Ok(entries)
    }

    pub fn load_csv(path: &Path, provenance: Provenance) -> Result<Self> {
        let rec = TuningRecord { provenance, entries: Self::read_entries(std::fs::File::open(path)?)? };
        rec.validate()?;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::OpType;

    fn spec() -> KernelSpec {
        KernelSpec { op_type: OpType::Conv2d, input_size: 14, in_channels: 8, out_channels: 16, kernel_size: 3, stride: 1, padding: 1 }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut r = TuningRecord::new(spec(), "random", 7);
        r.push(3, Measurement { gflops: 0.1 + 0.2, feasible: true }, Some(1.0 / 3.0));
        r.push(9, Measurement::INFEASIBLE, None);
        r.push(1, Measurement { gflops: 5.5, feasible: true }, Some(2.0));
        let text = r.to_csv_string();
        assert!(text.starts_with("iteration,config_index,measured_gflops,predicted_gflops,best_gflops\n"));
        let back = TuningRecord::read_entries(text.as_bytes()).unwrap();
        assert_eq!(back, r.entries);
        assert_eq!(r.best_curve(), vec![0.1 + 0.2, 0.1 + 0.2, 5.5]);
    }

    #[test]
    fn validate_catches_broken_running_max() {
        let mut r = TuningRecord::new(spec(), "xgb", 0);
        r.push(0, Measurement { gflops: 4.0, feasible: true }, None);
        r.push(1, Measurement { gflops: 2.0, feasible: true }, None);
        assert!(r.validate().is_ok());
        r.entries[1].best_gflops = 2.0;
        assert!(r.validate().is_err());
    }
}
