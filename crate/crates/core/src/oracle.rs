//! Deterministic synthetic stand-in for hardware measurement.
//!
//! The functional form is a caricature of a GPU convolution kernel: thread
//! occupancy peaking at a platform knee, shared-memory staging with data
//! reuse, register pressure, loop unrolling, padding waste and block-level
//! parallelism all multiply together, so knobs interact and the optimum
//! moves between platforms. Measurement noise and infeasible holes are drawn
//! from a hash of the measured tuple, so every measurement is reproducible.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AxisRole, KernelSpec, KnobConfig, KnobSpace, OpType, Schedule};
use crate::rng::{derive_seed, seeded};

pub const MAX_THREADS: f64 = 1024.0;
pub const NUM_SMS: f64 = 64.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub peak_gflops: f64,
    /// Per-thread register/L1 budget, in elements.
    pub l1_capacity: u32,
    /// Shared memory per block, in elements.
    pub shared_capacity: u32,
    /// Threads per block at which occupancy peaks.
    pub occupancy_knee: u32,
    pub unroll_benefit: f64,
    pub infeasible_fraction: f64,
    pub noise_std_rel: f64,
    pub seed: u64,
}

impl PlatformProfile {
    pub fn platform_a() -> Self {
        PlatformProfile {
            name: "platform-A".into(),
            peak_gflops: 13_400.0,
            l1_capacity: 64,
            shared_capacity: 12_288,
            occupancy_knee: 256,
            unroll_benefit: 0.2,
            infeasible_fraction: 0.02,
            noise_std_rel: 0.02,
            seed: 2080,
        }
    }

    pub fn platform_b() -> Self {
        PlatformProfile {
            name: "platform-B".into(),
            peak_gflops: 12_100.0,
            l1_capacity: 48,
            shared_capacity: 12_288,
            occupancy_knee: 96,
            unroll_benefit: 0.35,
            infeasible_fraction: 0.02,
            noise_std_rel: 0.02,
            seed: 1080,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "platform-A" | "A" | "a" => Ok(Self::platform_a()),
            "platform-B" | "B" | "b" => Ok(Self::platform_b()),
            _ => Err(Error::Config(format!("unknown platform profile `{name}`"))),
        }
    }

    /// A builtin profile name, or else a path to a profile TOML file.
    pub fn resolve(name: &str) -> Result<Self> {
        match Self::builtin(name) {
            Ok(p) => Ok(p),
            Err(e) if !Path::new(name).is_file() => Err(e),
            Err(_) => Self::load(Path::new(name)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_gflops > 0.0
            && self.l1_capacity > 0
            && self.shared_capacity > 0
            && self.occupancy_knee > 0
            && self.unroll_benefit >= 0.0
            && (0.0..1.0).contains(&self.infeasible_fraction)
            && self.noise_std_rel >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid platform profile {}", self.name)))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: PlatformProfile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub gflops: f64,
    pub feasible: bool,
}

impl Measurement {
    pub const INFEASIBLE: Measurement = Measurement { gflops: 0.0, feasible: false };
}

/// Uniform [0, 1) and a standard normal, both keyed on the measured tuple.
fn tuple_draws(p: &PlatformProfile, spec: &KernelSpec, s: &Schedule) -> (f64, f64) {
    let key = format!("{}|{:?}|{}|{}", spec.signature(), s.splits, s.unroll_step, s.unroll_explicit);
    let mut rng = seeded(derive_seed(p.seed, &key));
    let u: f64 = rng.gen();
    let z: f64 = StandardNormal.sample(&mut rng);
    (u, z)
}

/// Noise-free performance model and feasibility of a resolved schedule.
pub fn model_gflops(spec: &KernelSpec, s: &Schedule, p: &PlatformProfile) -> Option<f64> {
    let axes = spec.axes();
    let split = |name: &str| s.splits.get(name).map(Vec::as_slice);
    let mut threads = 1.0;
    let mut vthreads = 1.0;
    let mut per_thread = 1.0;
    let mut blocks = 1.0;
    let mut waste = 1.0;
    let cover = |name: &str| -> f64 {
        match split(name) {
            Some(f) if f.len() == 4 => (f[1] * f[2] * f[3]) as f64,
            _ => 1.0,
        }
    };
    let (cf, cy, cx) = (cover("f"), cover("y"), cover("x"));
    for a in &axes {
        let f = split(a.name).expect("every axis resolved");
        let covered: f64 = f.iter().map(|&v| v as f64).product();
        waste *= a.extent as f64 / covered;
        if a.role == AxisRole::Spatial {
            blocks *= f[0] as f64;
            vthreads *= f[1] as f64;
            threads *= f[2] as f64;
            per_thread *= (f[1] * f[3]) as f64;
        }
    }
    let chunk = |name: &str| split(name).map(|f| f[f.len() - 1] as f64).unwrap_or(1.0);
    let (crc, cry, crx) = (chunk("rc"), chunk("ry"), chunk("rx"));
    let k = spec.kernel_size as f64;
    let stride = if spec.op_type.is_transposed() { 1.0 } else { spec.stride as f64 };
    let span = |c: f64, r: f64| match spec.op_type {
        OpType::Winograd => 2.0 * c + k - 1.0,
        _ => (c - 1.0) * stride + r,
    };
    let span_y = if spec.op_type.is_1d() { 1.0 } else { span(cy, cry) };
    let span_x = span(cx, crx);
    let (input, weight) = match spec.op_type {
        OpType::Depthwise => (cf * span_y * span_x, cf * cry * crx),
        OpType::Winograd => (crc * span_y * span_x, cf * crc * (k + 1.0) * (k + 1.0)),
        _ => (crc * span_y * span_x, cf * crc * cry * crx),
    };
    let shared = input + weight;
    if threads > MAX_THREADS || shared > p.shared_capacity as f64 {
        return None;
    }

    let r = threads / p.occupancy_knee as f64;
    let occupancy = 2.0 * r / (1.0 + r * r);
    let warp_eff = threads / (32.0 * (threads / 32.0).ceil());
    let chunk_flops = 2.0 * cf * cy * cx * crc * cry * crx;
    let intensity = chunk_flops / shared;
    let reuse = intensity / (intensity + 8.0);
    let parallel = (blocks / NUM_SMS).min(1.0).powf(0.7);
    let spill = if per_thread > p.l1_capacity as f64 { (p.l1_capacity as f64 / per_thread).powf(0.7) } else { 1.0 };
    let ilp = 0.6 + 0.4 * (per_thread / 16.0).min(1.0);
    let vt = match vthreads {
        v if v <= 1.0 => 1.0,
        v if v <= 4.0 => 1.06,
        v if v <= 16.0 => 1.0,
        _ => 0.85,
    };
    let body = crc * cry * crx * per_thread;
    let limit = s.unroll_limit() as f64;
    let unroll = if limit == 0.0 {
        1.0
    } else if body <= limit {
        1.0 + p.unroll_benefit * (1.0 - body.log2() / 11.0).clamp(-0.3, 1.0)
    } else {
        1.0 + 0.25 * p.unroll_benefit
    };
    let op_factor = match spec.op_type {
        OpType::Conv2d => 1.0,
        OpType::Transpose2d => 0.85,
        OpType::Winograd => 1.35,
        OpType::Depthwise => 0.45,
        OpType::Conv1d => 0.9,
        OpType::Transpose1d => 0.8,
    };
    let work = spec.flops();
    let scale = op_factor * (0.3 + 0.7 * work / (work + 2e7));
    Some(p.peak_gflops * occupancy * warp_eff * reuse * parallel * waste * spill * ilp * vt * unroll * scale)
}

pub fn measure_schedule(spec: &KernelSpec, s: &Schedule, p: &PlatformProfile) -> Measurement {
    let (u, z) = tuple_draws(p, spec, s);
    if u < p.infeasible_fraction {
        return Measurement::INFEASIBLE;
    }
    match model_gflops(spec, s, p) {
        Some(g) => {
            let noisy = g * (p.noise_std_rel * z).exp();
            Measurement { gflops: noisy.max(f64::MIN_POSITIVE), feasible: true }
        }
        None => Measurement::INFEASIBLE,
    }
}

pub fn measure(spec: &KernelSpec, space: &KnobSpace, config: &KnobConfig, p: &PlatformProfile) -> Result<Measurement> {
    let s = Schedule::resolve(spec, space, config)?;
    Ok(measure_schedule(spec, &s, p))
}

pub fn batch_measure(
    spec: &KernelSpec,
    space: &KnobSpace,
    configs: &[KnobConfig],
    p: &PlatformProfile,
) -> Result<Vec<Measurement>> {
    use rayon::prelude::*;
    configs.par_iter().map(|c| measure(spec, space, c, p)).collect()
}

/// Measures every config of a space, in index order.
pub fn enumerate(spec: &KernelSpec, space: &KnobSpace, p: &PlatformProfile) -> Result<Vec<Measurement>> {
    let configs = (0..space.size()).map(|i| space.index_config(i)).collect::<Result<Vec<_>>>()?;
    batch_measure(spec, space, &configs, p)
}

/// Writes `config_index,gflops,feasible` rows.
pub fn write_enumeration<W: std::io::Write>(ms: &[Measurement], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_index", "gflops", "feasible"])?;
    for (i, m) in ms.iter().enumerate() {
        out.write_record([i.to_string(), m.gflops.to_string(), m.feasible.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_enumeration<R: std::io::Read>(r: R) -> Result<Vec<Measurement>> {
    let mut out = Vec::new();
    for (row, rec) in csv::Reader::from_reader(r).records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("enumeration row {}: bad {what}", row + 1));
        if rec.get(0).and_then(|v| v.parse::<usize>().ok()) != Some(row) {
            return Err(bad("config_index"));
        }
        let gflops = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("gflops"))?;
        let feasible = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("feasible"))?;
        out.push(Measurement { gflops, feasible });
    }
    Ok(out)
}

/// Index of the best measurement, or `None` when the maximum is shared.
pub fn unique_argmax(ms: &[Measurement]) -> Option<u64> {
    let best = ms.iter().map(|m| m.gflops).fold(f64::NEG_INFINITY, f64::max);
    let mut hits = ms.iter().enumerate().filter(|(_, m)| m.gflops == best);
    let first = hits.next()?.0 as u64;
    hits.next().is_none().then_some(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_knob_space, sample_configs};

    fn spec() -> KernelSpec {
        KernelSpec {
            op_type: OpType::Conv2d,
            input_size: 56,
            in_channels: 64,
            out_channels: 64,
            kernel_size: 3,
            stride: 1,
            padding: 1,
        }
    }

    #[test]
    fn deterministic_without_noise() {
        let mut p = PlatformProfile::platform_a();
        p.noise_std_rel = 0.0;
        let s = spec();
        let space = build_knob_space(&s);
        for c in sample_configs(&space, 50, &mut seeded(1)) {
            let a = measure(&s, &space, &c, &p).unwrap();
            let b = measure(&s, &space, &c, &p).unwrap();
            assert_eq!(a.gflops.to_bits(), b.gflops.to_bits());
            assert_eq!(a.feasible, b.feasible);
            assert!(a.feasible || a.gflops == 0.0);
        }
    }

    #[test]
    fn oversized_tiles_are_infeasible() {
        let p = PlatformProfile::platform_a();
        let s = spec();
        let space = build_knob_space(&s);
        // largest thread split on every spatial axis
        let mut cfg = space.index_config(0).unwrap();
        for name in ["tile_x", "tile_y", "tile_f"] {
            let (i, k) = space.knob(name).unwrap();
            let best = (0..k.cardinality())
                .max_by_key(|&j| match &k.values[j] {
                    crate::kernel::KnobValue::Split(f) => f[2],
                    _ => 0,
                })
                .unwrap();
            cfg.choices[i] = best as u32;
        }
        let m = measure(&s, &space, &cfg, &p).unwrap();
        assert!(!m.feasible);
        assert_eq!(m.gflops, 0.0);
    }

    #[test]
    fn batch_is_elementwise() {
        let p = PlatformProfile::platform_a();
        let s = spec();
        let space = build_knob_space(&s);
        let configs = sample_configs(&space, 20, &mut seeded(2));
        let batch = batch_measure(&s, &space, &configs, &p).unwrap();
        let singles: Vec<_> = configs.iter().map(|c| measure(&s, &space, c, &p).unwrap()).collect();
        assert_eq!(batch, singles);
        let mut rev = configs.clone();
        rev.reverse();
        let mut rb = batch_measure(&s, &space, &rev, &p).unwrap();
        rb.reverse();
        assert_eq!(rb, batch);
        assert!(batch_measure(&s, &space, &[], &p).unwrap().is_empty());
    }

    #[test]
    fn profiles_round_trip_toml() {
        let p = PlatformProfile::platform_b();
        let back: PlatformProfile = toml::from_str(&p.to_toml()).unwrap();
        assert_eq!(back, p);
        assert!(PlatformProfile::builtin("platform-C").is_err());
    }
}
