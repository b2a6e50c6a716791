//! Meta-training dataset: random kernel classes, uniformly sampled configs
//! per class, labels from a training platform profile.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{encode, SuperGraphTemplate};
use crate::kernel::{build_knob_space, lower_to_loop_nest, sample_indices, KernelSpec, OpType};
use crate::meta::LabeledSample;
use crate::model::log2_gflops;
use crate::oracle::{batch_measure, PlatformProfile};
use crate::rng::content_hash;

/// Inclusive ranges for the generated dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimRanges {
    pub input_size: (u32, u32),
    pub in_channels: (u32, u32),
    pub out_channels: (u32, u32),
}

impl DimRanges {
    pub const ONE_D: DimRanges = DimRanges { input_size: (150, 600), in_channels: (32, 128), out_channels: (32, 512) };
    pub const TWO_D: DimRanges = DimRanges { input_size: (7, 224), in_channels: (3, 128), out_channels: (16, 128) };

    fn within(&self, outer: &DimRanges) -> bool {
        let inside = |(lo, hi): (u32, u32), (olo, ohi): (u32, u32)| lo <= hi && lo >= olo && hi <= ohi;
        inside(self.input_size, outer.input_size)
            && inside(self.in_channels, outer.in_channels)
            && inside(self.out_channels, outer.out_channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Operation types assigned to classes round-robin.
    pub op_types: Vec<OpType>,
    pub kernel_sizes: Vec<u32>,
    pub stride: u32,
    pub padding: u32,
    pub ranges_1d: DimRanges,
    pub ranges_2d: DimRanges,
    /// Profile providing the labels.
    pub profile: String,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            num_classes: 47,
            samples_per_class: 200,
            op_types: OpType::ALL.to_vec(),
            kernel_sizes: vec![3, 5],
            stride: 3,
            padding: 1,
            ranges_1d: DimRanges::ONE_D,
            ranges_2d: DimRanges::TWO_D,
            profile: "platform-A".into(),
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if !self.ranges_1d.within(&DimRanges::ONE_D) || !self.ranges_2d.within(&DimRanges::TWO_D) {
            return Err(Error::domain("dimension ranges must lie inside the generator bounds"));
        }
        if self.num_classes == 0 || self.samples_per_class == 0 || self.op_types.is_empty() || self.kernel_sizes.is_empty() {
            return Err(Error::domain("dataset needs classes, samples, op types and kernel sizes"));
        }
        if self.stride == 0 || self.kernel_sizes.contains(&0) {
            return Err(Error::domain("stride and kernel sizes must be positive"));
        }
        Ok(())
    }
}

/// One labeled config of a dataset class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub class: usize,
    pub config_index: u64,
    pub gflops: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<KernelSpec>,
    pub rows: Vec<DatasetRow>,
}

/// Flat CSV layout: spec fields followed by the measurement.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    op_type: OpType,
    input_size: u32,
    in_channels: u32,
    out_channels: u32,
    kernel_size: u32,
    stride: u32,
    padding: u32,
    config_index: u64,
    gflops: f64,
    feasible: bool,
}

pub fn sample_spec<R: Rng + ?Sized>(op: OpType, p: &DatasetParams, rng: &mut R) -> KernelSpec {
    let r = if op.is_1d() { p.ranges_1d } else { p.ranges_2d };
    let input_size = rng.gen_range(r.input_size.0..=r.input_size.1);
    let out_channels = rng.gen_range(r.out_channels.0..=r.out_channels.1);
    let mut in_channels = rng.gen_range(r.in_channels.0..=r.in_channels.1);
    if op == OpType::Depthwise {
        in_channels = out_channels.clamp(r.in_channels.0, r.in_channels.1);
    }
    let kernel_size = if op == OpType::Winograd { 3 } else { p.kernel_sizes[rng.gen_range(0..p.kernel_sizes.len())] };
    KernelSpec { op_type: op, input_size, in_channels, out_channels, kernel_size, stride: p.stride, padding: p.padding }
}

pub fn gen_dataset<R: Rng + ?Sized>(params: &DatasetParams, rng: &mut R) -> Result<Dataset> {
    params.validate()?;
    let profile = PlatformProfile::resolve(&params.profile)?;
    let mut classes = Vec::with_capacity(params.num_classes);
    let mut seen = BTreeSet::new();
    while classes.len() < params.num_classes {
        let op = params.op_types[classes.len() % params.op_types.len()];
        let spec = sample_spec(op, params, rng);
        if spec.validate().is_ok() && seen.insert(spec.signature()) {
            classes.push(spec);
        }
    }
    let mut rows = Vec::with_capacity(params.num_classes * params.samples_per_class);
    for (c, spec) in classes.iter().enumerate() {
        let space = build_knob_space(spec);
        let idx = sample_indices(space.size(), params.samples_per_class.min(space.size() as usize), rng);
        let configs = idx.iter().map(|&i| space.index_config(i)).collect::<Result<Vec<_>>>()?;
        for (i, m) in idx.into_iter().zip(batch_measure(spec, &space, &configs, &profile)?) {
            rows.push(DatasetRow { class: c, config_index: i, gflops: m.gflops, feasible: m.feasible });
        }
    }
    Ok(Dataset { classes, rows })
}

impl Dataset {
    pub fn signatures(&self) -> BTreeSet<String> {
        self.classes.iter().map(KernelSpec::signature).collect()
    }

    pub fn content_hash(&self) -> String {
        content_hash(self.to_csv_string().as_bytes())
    }

    /// Graph-labeled samples; `template` selects the augmented variant.
    pub fn samples(&self, template: Option<&SuperGraphTemplate>) -> Result<Vec<LabeledSample>> {
        use rayon::prelude::*;
        let spaces: Vec<_> = self.classes.iter().map(build_knob_space).collect();
        self.rows
            .par_iter()
            .map(|r| {
                let spec = &self.classes[r.class];
                let space = &spaces[r.class];
                let mut graph = encode(&lower_to_loop_nest(spec, space, &space.index_config(r.config_index)?)?, template)?;
                graph.label = Some(log2_gflops(r.gflops));
                Ok(LabeledSample { graph, kernel_class: spec.signature(), label_gflops: r.gflops })
            })
            .collect()
    }

    /// Raw and super-graph augmented variants of every sample.
    pub fn variants(&self, template: &SuperGraphTemplate) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
        Ok((self.samples(None)?, self.samples(Some(template))?))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            let s = &self.classes[r.class];
            out.serialize(CsvRow {
                op_type: s.op_type,
                input_size: s.input_size,
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                kernel_size: s.kernel_size,
                stride: s.stride,
                padding: s.padding,
                config_index: r.config_index,
                gflops: r.gflops,
                feasible: r.feasible,
            })?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut classes: Vec<KernelSpec> = Vec::new();
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: CsvRow = row?;
            let spec = KernelSpec {
                op_type: row.op_type,
                input_size: row.input_size,
                in_channels: row.in_channels,
                out_channels: row.out_channels,
                kernel_size: row.kernel_size,
                stride: row.stride,
                padding: row.padding,
            };
            let class = match classes.iter().position(|c| *c == spec) {
                Some(c) => c,
                None => {
                    spec.validate()?;
                    classes.push(spec);
                    classes.len() - 1
                }
            };
            rows.push(DatasetRow { class, config_index: row.config_index, gflops: row.gflops, feasible: row.feasible });
        }
        Ok(Dataset { classes, rows })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Held-out tuning targets: ResNet-style conv2d layers outside the training
/// distribution's stride.
pub fn held_out_kernels() -> Vec<KernelSpec> {
    let conv = |input_size, in_channels, out_channels, stride| KernelSpec {
        op_type: OpType::Conv2d,
        input_size,
        in_channels,
        out_channels,
        kernel_size: 3,
        stride,
        padding: 1,
    };
    vec![conv(56, 64, 64, 1), conv(56, 64, 128, 2), conv(28, 128, 128, 1), conv(14, 128, 128, 1)]
}

/// Fails when any target shares a signature with a training class.
pub fn check_held_out(dataset: &Dataset, targets: &[KernelSpec]) -> Result<()> {
    let train = dataset.signatures();
    match targets.iter().find(|t| train.contains(&t.signature())) {
        Some(t) => Err(Error::Config(format!("target kernel {} appears in the training dataset", t.signature()))),
        None => Ok(()),
    }
}
