//! Convolution tasks, their discrete knob spaces and lowering to loop nests.
//!
//! Every operation type owns a fixed schedule template: the set of loop axes,
//! how many tiling levels each axis is split into and the order of the
//! resulting loops. Knob values only change loop extents and annotations, so
//! all nests of one type are isomorphic trees.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    Conv1d,
    Transpose1d,
    Conv2d,
    Transpose2d,
    Winograd,
    Depthwise,
}

impl OpType {
    pub const ALL: [OpType; 6] = [
        OpType::Conv1d,
        OpType::Transpose1d,
        OpType::Conv2d,
        OpType::Transpose2d,
        OpType::Winograd,
        OpType::Depthwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpType::Conv1d => "conv1d",
            OpType::Transpose1d => "transpose1d",
            OpType::Conv2d => "conv2d",
            OpType::Transpose2d => "transpose2d",
            OpType::Winograd => "winograd",
            OpType::Depthwise => "depthwise",
        }
    }

    pub fn is_1d(self) -> bool {
        matches!(self, OpType::Conv1d | OpType::Transpose1d)
    }

    pub fn is_transposed(self) -> bool {
        matches!(self, OpType::Transpose1d | OpType::Transpose2d)
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpType::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::domain(format!("unsupported op_type `{s}`")))
    }
}

/// One convolution task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelSpec {
    pub op_type: OpType,
    pub input_size: u32,
    pub in_channels: u32,
    pub out_channels: u32,
    pub kernel_size: u32,
    pub stride: u32,
    pub padding: u32,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::domain(format!("{name} must be positive")));
            }
        }
        if !self.op_type.is_transposed() && self.input_size + 2 * self.padding < self.kernel_size {
            return Err(Error::domain("kernel larger than padded input"));
        }
        if self.output_size() == 0 {
            return Err(Error::domain("empty output"));
        }
        Ok(())
    }

    /// Spatial extent of the output along each spatial dimension.
    pub fn output_size(&self) -> u32 {
        let (i, k, s, p) = (
            self.input_size as i64,
            self.kernel_size as i64,
            self.stride as i64,
            self.padding as i64,
        );
        let o = if self.op_type.is_transposed() {
            (i - 1) * s - 2 * p + k
        } else {
            (i + 2 * p - k).div_euclid(s) + 1
        };
        o.max(0) as u32
    }

    /// Class identity used for task sampling and held-out checks.
    pub fn signature(&self) -> String {
        format!(
            "{}-i{}-c{}-o{}-k{}-s{}-p{}",
            self.op_type,
            self.input_size,
            self.in_channels,
            self.out_channels,
            self.kernel_size,
            self.stride,
            self.padding
        )
    }

    /// Total floating point operations of one kernel invocation.
    pub fn flops(&self) -> f64 {
        let axes = self.axes();
        let work: f64 = axes
            .iter()
            .filter(|a| a.role != AxisRole::Transform)
            .map(|a| a.extent as f64)
            .product();
        2.0 * work
    }

    /// The loop axes of this kernel's schedule template, in canonical order.
    pub fn axes(&self) -> Vec<Axis> {
        let o = self.output_size();
        let k = self.kernel_size;
        let sp = |name, extent| Axis { name, extent, role: AxisRole::Spatial };
        let red = |name, extent| Axis { name, extent, role: AxisRole::Reduction };
        let tr = |name, extent| Axis { name, extent, role: AxisRole::Transform };
        match self.op_type {
            OpType::Conv1d | OpType::Transpose1d => vec![
                sp("f", self.out_channels),
                sp("x", o),
                red("rc", self.in_channels),
                red("rx", k),
            ],
            OpType::Conv2d | OpType::Transpose2d => vec![
                sp("f", self.out_channels),
                sp("y", o),
                sp("x", o),
                red("rc", self.in_channels),
                red("ry", k),
                red("rx", k),
            ],
            OpType::Winograd => {
                // F(2, k) winograd: spatial axes count output tiles of width 2.
                let tiles = o.div_ceil(2);
                vec![
                    sp("f", self.out_channels),
                    sp("y", tiles),
                    sp("x", tiles),
                    tr("eps", k + 1),
                    tr("nu", k + 1),
                    red("rc", self.in_channels),
                ]
            }
            OpType::Depthwise => vec![
                sp("f", self.out_channels),
                sp("y", o),
                sp("x", o),
                red("ry", k),
                red("rx", k),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisRole {
    Spatial,
    Reduction,
    Transform,
}

impl AxisRole {
    /// Number of loops the axis is split into.
    pub fn levels(self) -> usize {
        match self {
            AxisRole::Spatial => 4,
            AxisRole::Reduction => 2,
            AxisRole::Transform => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub name: &'static str,
    pub extent: u32,
    pub role: AxisRole,
}

/// A single admissible knob value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnobValue {
    Bool(bool),
    Int(i64),
    /// Loop split factors, outermost first.
    Split(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnobDef {
    pub name: String,
    pub values: Vec<KnobValue>,
}

impl KnobDef {
    pub fn new(name: impl Into<String>, values: Vec<KnobValue>) -> Result<Self> {
        let name = name.into();
        if values.is_empty() {
            return Err(Error::domain(format!("knob {name} has no values")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!("knob {name} values not strictly ordered")));
        }
        Ok(KnobDef { name, values })
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

/// Ordered list of knobs; the order is part of the space's identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnobSpace {
    pub knobs: Vec<KnobDef>,
}

/// One point in a [`KnobSpace`]: a value index per knob.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KnobConfig {
    pub choices: Vec<u32>,
}

/// Serialized form of a [`KnobConfig`]: its mixed-radix index plus the hash of
/// the space it indexes into.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRef {
    pub index: u64,
    pub space_hash: String,
}

impl KnobSpace {
    pub fn new(knobs: Vec<KnobDef>) -> Self {
        KnobSpace { knobs }
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.knobs.iter().map(KnobDef::cardinality).collect()
    }

    pub fn size(&self) -> u64 {
        self.knobs.iter().map(|k| k.cardinality() as u64).product()
    }

    pub fn knob(&self, name: &str) -> Option<(usize, &KnobDef)> {
        self.knobs.iter().enumerate().find(|(_, k)| k.name == name)
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("knob space serializes");
        crate::rng::content_hash(&json)
    }

    pub fn check(&self, config: &KnobConfig) -> Result<()> {
        if config.choices.len() != self.knobs.len() {
            return Err(Error::domain(format!(
                "config has {} choices, space has {} knobs",
                config.choices.len(),
                self.knobs.len()
            )));
        }
        for (c, k) in config.choices.iter().zip(&self.knobs) {
            if *c as usize >= k.cardinality() {
                return Err(Error::domain(format!(
                    "choice {c} out of range for knob {} ({} values)",
                    k.name,
                    k.cardinality()
                )));
            }
        }
        Ok(())
    }

    /// Mixed-radix index with knob 0 as the most significant digit.
    pub fn config_index(&self, config: &KnobConfig) -> Result<u64> {
        self.check(config)?;
        Ok(self
            .knobs
            .iter()
            .zip(&config.choices)
            .fold(0u64, |acc, (k, &c)| acc * k.cardinality() as u64 + c as u64))
    }

    pub fn index_config(&self, index: u64) -> Result<KnobConfig> {
        if index >= self.size() {
            return Err(Error::domain(format!(
                "index {index} outside space of size {}",
                self.size()
            )));
        }
        let mut rest = index;
        let mut choices = vec![0u32; self.knobs.len()];
        for (slot, k) in choices.iter_mut().zip(&self.knobs).rev() {
            let radix = k.cardinality() as u64;
            *slot = (rest % radix) as u32;
            rest /= radix;
        }
        Ok(KnobConfig { choices })
    }

    pub fn to_ref(&self, config: &KnobConfig) -> Result<ConfigRef> {
        Ok(ConfigRef { index: self.config_index(config)?, space_hash: self.content_hash() })
    }

    pub fn from_ref(&self, r: &ConfigRef) -> Result<KnobConfig> {
        if r.space_hash != self.content_hash() {
            return Err(Error::domain("config belongs to a different knob space"));
        }
        self.index_config(r.index)
    }

    /// Knob coordinates normalised to [0, 1) by value-index / cardinality.
    pub fn coordinates(&self, config: &KnobConfig) -> Vec<f64> {
        config
            .choices
            .iter()
            .zip(&self.knobs)
            .map(|(&c, k)| c as f64 / k.cardinality() as f64)
            .collect()
    }

    pub fn value(&self, config: &KnobConfig, knob: usize) -> &KnobValue {
        &self.knobs[knob].values[config.choices[knob] as usize]
    }
}

/// Knob families in canonical order with their counts for the full 2-D template.
pub const KNOB_TABLE: [(&str, usize); 8] = [
    ("tile_x", 140),
    ("tile_y", 140),
    ("tile_f", 120),
    ("tile_rc", 8),
    ("tile_rx", 2),
    ("tile_ry", 2),
    ("auto_unroll_max_step", 3),
    ("unroll_explicit", 2),
];

pub const UNROLL_STEPS: [i64; 3] = [0, 512, 1500];

/// Builds the knob space of a kernel: the shared knob families restricted to
/// the axes that exist for its operation type.
pub fn build_knob_space(spec: &KernelSpec) -> KnobSpace {
    build_knob_space_with_counts(spec, &KNOB_TABLE)
}

/// Like [`build_knob_space`] but keeping only the listed knobs, each with the
/// given number of values. Knobs whose axis does not exist are skipped.
pub fn build_knob_space_with_counts(spec: &KernelSpec, counts: &[(&str, usize)]) -> KnobSpace {
    let axes = spec.axes();
    let mut knobs = Vec::new();
    for &(name, count) in counts {
        let def = match name {
            "auto_unroll_max_step" => {
                let values = UNROLL_STEPS.iter().take(count).map(|&s| KnobValue::Int(s)).collect();
                KnobDef { name: name.to_string(), values }
            }
            "unroll_explicit" => {
                let values = [false, true].into_iter().take(count).map(KnobValue::Bool).collect();
                KnobDef { name: name.to_string(), values }
            }
            _ => {
                let Some(axis_name) = name.strip_prefix("tile_") else { continue };
                let Some(axis) = axes.iter().find(|a| a.name == axis_name) else { continue };
                let values = tile_candidates(axis.extent, axis.role.levels(), count)
                    .into_iter()
                    .map(KnobValue::Split)
                    .collect();
                KnobDef { name: name.to_string(), values }
            }
        };
        knobs.push(def);
    }
    KnobSpace { knobs }
}

/// A 256-config search fixture: conv2d with a thread-count knob on the
/// output-channel axis and a per-thread-work knob on the x axis, 16 values
/// each in increasing order, so both coordinates are ordinal.
pub fn toy_space() -> (KernelSpec, KnobSpace) {
    let spec = KernelSpec { op_type: OpType::Conv2d, input_size: 56, in_channels: 64, out_channels: 512, kernel_size: 3, stride: 1, padding: 1 };
    let threads = (1..=16u32).map(|k| KnobValue::Split(vec![512u32.div_ceil(16 * k), 1, 16 * k, 1])).collect();
    let work = (1..=16u32).map(|v| KnobValue::Split(vec![56u32.div_ceil(v), 1, 1, v])).collect();
    let space = KnobSpace::new(vec![
        KnobDef { name: "tile_f".into(), values: threads },
        KnobDef { name: "tile_x".into(), values: work },
    ]);
    (spec, space)
}

/// All ordered factorizations of `n` into `parts` factors, lexicographic.
pub fn factorizations(n: u32, parts: usize) -> Vec<Vec<u32>> {
    fn go(n: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for d in 1..=n {
            if n.is_multiple_of(d) {
                prefix.push(d);
                go(n / d, parts - 1, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Tile split candidates for an axis: exact factorizations of the extent,
/// evenly subsampled when there are more than `count`, otherwise padded with
/// factorizations of successively larger (ceiling-split) extents.
pub fn tile_candidates(extent: u32, parts: usize, count: usize) -> Vec<Vec<u32>> {
    let exact = factorizations(extent, parts);
    if exact.len() >= count {
        return (0..count).map(|i| exact[i * exact.len() / count].clone()).collect();
    }
    let mut out = exact;
    let mut e = extent;
    while out.len() < count {
        e += 1;
        for f in factorizations(e, parts) {
            if out.len() == count {
                break;
            }
            out.push(f);
        }
    }
    out.sort();
    out
}

/// Uniformly samples `n` configurations, without replacement while `n` does
/// not exceed the space size.
pub fn sample_configs<R: Rng + ?Sized>(space: &KnobSpace, n: usize, rng: &mut R) -> Vec<KnobConfig> {
    sample_indices(space.size(), n, rng)
        .into_iter()
        .map(|i| space.index_config(i).expect("sampled index in range"))
        .collect()
}

pub fn sample_indices<R: Rng + ?Sized>(size: u64, n: usize, rng: &mut R) -> Vec<u64> {
    if size == 0 {
        return Vec::new();
    }
    if n as u64 <= size {
        rand::seq::index::sample(rng, size as usize, n)
            .into_iter()
            .map(|i| i as u64)
            .collect()
    } else {
        let mut all: Vec<u64> = rand::seq::index::sample(rng, size as usize, size as usize)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        while all.len() < n {
            all.push(rng.gen_range(0..size));
        }
        all
    }
}

/// Knob values resolved onto a kernel's axes. Axes without a tiling knob keep
/// the whole extent in their outermost loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub splits: BTreeMap<&'static str, Vec<u32>>,
    pub unroll_step: u32,
    pub unroll_explicit: bool,
}

impl Schedule {
    pub fn resolve(spec: &KernelSpec, space: &KnobSpace, config: &KnobConfig) -> Result<Schedule> {
        space.check(config)?;
        let mut splits = BTreeMap::new();
        for axis in spec.axes() {
            let knob = format!("tile_{}", axis.name);
            let split = match space.knob(&knob) {
                Some((i, _)) => match space.value(config, i) {
                    KnobValue::Split(s) if s.len() == axis.role.levels() => s.clone(),
                    other => {
                        return Err(Error::domain(format!("knob {knob} has unexpected value {other:?}")))
                    }
                },
                None => {
                    let mut s = vec![1; axis.role.levels()];
                    s[0] = axis.extent;
                    s
                }
            };
            splits.insert(axis.name, split);
        }
        for (k, _) in space.knobs.iter().enumerate() {
            let name = &space.knobs[k].name;
            if let Some(axis) = name.strip_prefix("tile_") {
                if !splits.contains_key(axis) {
                    return Err(Error::domain(format!("knob {name} has no axis in {}", spec.op_type)));
                }
            }
        }
        let unroll_step = match space.knob("auto_unroll_max_step") {
            Some((i, _)) => match space.value(config, i) {
                KnobValue::Int(v) => *v as u32,
                other => return Err(Error::domain(format!("bad unroll step {other:?}"))),
            },
            None => 0,
        };
        let unroll_explicit = match space.knob("unroll_explicit") {
            Some((i, _)) => matches!(space.value(config, i), KnobValue::Bool(true)),
            None => false,
        };
        Ok(Schedule { splits, unroll_step, unroll_explicit })
    }

    /// Trip-count bound under which a loop subtree is unrolled. Without explicit
    /// unrolling the backend only unrolls short loops.
    pub fn unroll_limit(&self) -> u64 {
        match (self.unroll_step, self.unroll_explicit) {
            (0, _) => 0,
            (s, true) => s as u64,
            (s, false) => (s as u64).min(64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AstKind {
    Seq,
    ForLoop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub tile_level: u8,
    pub unrolled: bool,
    pub reduction: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstNode {
    pub kind: AstKind,
    /// `<axis>.<level>` for loops, e.g. `x.2`; `None` for sequence nodes.
    pub axis_name: Option<String>,
    pub extent: u32,
    pub annotations: Annotations,
    pub children: Vec<AstNode>,
}

impl AstNode {
    pub fn seq(children: Vec<AstNode>) -> Self {
        AstNode { kind: AstKind::Seq, axis_name: None, extent: 1, annotations: Annotations::default(), children }
    }

    /// Base axis of a loop (`x` for `x.2`).
    pub fn axis(&self) -> Option<&str> {
        self.axis_name.as_deref().map(|n| n.split('.').next().unwrap_or(n))
    }

    /// Loops in pre-order.
    pub fn loops(&self) -> Vec<&AstNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            if n.kind == AstKind::ForLoop {
                out.push(n);
            }
            stack.extend(n.children.iter().rev());
        }
        out
    }

    /// Structure-only fingerprint: node kinds, names and nesting, ignoring extents.
    pub fn shape_key(&self) -> String {
        let mut s = String::new();
        fn go(n: &AstNode, s: &mut String) {
            s.push('(');
            s.push_str(match n.kind {
                AstKind::Seq => "seq",
                AstKind::ForLoop => "for",
            });
            if let Some(a) = &n.axis_name {
                s.push(' ');
                s.push_str(a);
            }
            for c in &n.children {
                go(c, s);
            }
            s.push(')');
        }
        go(self, &mut s);
        s
    }
}

/// A lowered kernel. The spec travels with the tree so per-loop access and
/// footprint statistics can be derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopNest {
    pub spec: KernelSpec,
    pub root: AstNode,
}

impl LoopNest {
    pub fn loops(&self) -> Vec<&AstNode> {
        self.root.loops()
    }
}

/// Loop order of a template as (axis, level) pairs, outermost first: block,
/// virtual-thread and thread levels of the spatial axes, transform loops,
/// outer then inner reduction loops, and finally the per-thread spatial loops.
pub fn loop_order(axes: &[Axis]) -> Vec<(usize, usize)> {
    let mut order = Vec::new();
    let of = |role| axes.iter().enumerate().filter(move |(_, a)| a.role == role).map(|(i, _)| i);
    for level in 0..3 {
        order.extend(of(AxisRole::Spatial).map(|i| (i, level)));
    }
    order.extend(of(AxisRole::Transform).map(|i| (i, 0)));
    order.extend(of(AxisRole::Reduction).map(|i| (i, 0)));
    order.extend(of(AxisRole::Reduction).map(|i| (i, 1)));
    order.extend(of(AxisRole::Spatial).map(|i| (i, 3)));
    order
}

pub fn lower_to_loop_nest(spec: &KernelSpec, space: &KnobSpace, config: &KnobConfig) -> Result<LoopNest> {
    let schedule = Schedule::resolve(spec, space, config)?;
    Ok(lower_schedule(spec, &schedule))
}

pub fn lower_schedule(spec: &KernelSpec, schedule: &Schedule) -> LoopNest {
    let axes = spec.axes();
    let order = loop_order(&axes);
    let extents: Vec<u32> = order.iter().map(|&(a, l)| schedule.splits[axes[a].name][l]).collect();
    let limit = schedule.unroll_limit();

    // Build innermost-first so every loop knows its subtree trip count.
    let mut child: Option<AstNode> = None;
    let mut trip: u64 = 1;
    for (pos, &(a, level)) in order.iter().enumerate().rev() {
        let axis = &axes[a];
        let extent = extents[pos];
        trip = trip.saturating_mul(extent as u64);
        // Loops bound to hardware threads/blocks are never unrolled.
        let bound = axis.role == AxisRole::Spatial && level < 3;
        let node = AstNode {
            kind: AstKind::ForLoop,
            axis_name: Some(format!("{}.{}", axis.name, level)),
            extent,
            annotations: Annotations {
                tile_level: level as u8,
                unrolled: !bound && limit > 0 && trip <= limit,
                reduction: axis.role == AxisRole::Reduction,
            },
            children: child.take().into_iter().collect(),
        };
        child = Some(node);
    }
    LoopNest { spec: spec.clone(), root: AstNode::seq(child.into_iter().collect()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn conv2d() -> KernelSpec {
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
    fn conv2d_space_matches_knob_table() {
        let space = build_knob_space(&conv2d());
        assert_eq!(space.cardinalities(), vec![140, 140, 120, 8, 2, 2, 3, 2]);
        let names: Vec<_> = space.knobs.iter().map(|k| k.name.as_str()).collect();
        assert_eq!(
            names,
            ["tile_x", "tile_y", "tile_f", "tile_rc", "tile_rx", "tile_ry", "auto_unroll_max_step", "unroll_explicit"]
        );
        assert_eq!(space.size(), 451_584_000);
    }

    #[test]
    fn cardinalities_hold_for_tiny_kernels() {
        let spec = KernelSpec { input_size: 7, in_channels: 3, out_channels: 16, kernel_size: 1, ..conv2d() };
        let space = build_knob_space(&spec);
        assert_eq!(space.cardinalities(), vec![140, 140, 120, 8, 2, 2, 3, 2]);
        for k in &space.knobs {
            assert!(k.values.windows(2).all(|w| w[0] < w[1]), "{} not strictly ordered", k.name);
        }
    }

    #[test]
    fn one_d_and_depthwise_prune_axes() {
        let c1 = build_knob_space(&KernelSpec { op_type: OpType::Conv1d, ..conv2d() });
        assert!(c1.knob("tile_y").is_none() && c1.knob("tile_ry").is_none());
        assert!(c1.knob("tile_x").is_some() && c1.knob("tile_rx").is_some());
        let dw = build_knob_space(&KernelSpec { op_type: OpType::Depthwise, ..conv2d() });
        assert!(dw.knob("tile_rc").is_none());
        assert_eq!(dw.knobs.len(), 7);
    }

    #[test]
    fn index_edges() {
        let space = build_knob_space(&conv2d());
        let zero = KnobConfig { choices: vec![0; 8] };
        assert_eq!(space.config_index(&zero).unwrap(), 0);
        let mut last = zero.clone();
        last.choices[7] = 1;
        assert_eq!(space.config_index(&last).unwrap(), 1);
        assert!(space.index_config(space.size()).is_err());
        assert!(space.config_index(&KnobConfig { choices: vec![0; 7] }).is_err());
        let mut bad = zero;
        bad.choices[4] = 2;
        assert!(space.config_index(&bad).is_err());
    }

    #[test]
    fn config_ref_checks_space() {
        let space = build_knob_space(&conv2d());
        let other = build_knob_space(&KernelSpec { out_channels: 32, ..conv2d() });
        let cfg = space.index_config(12345).unwrap();
        let r = space.to_ref(&cfg).unwrap();
        assert_eq!(space.from_ref(&r).unwrap(), cfg);
        assert!(other.from_ref(&r).is_err());
    }

    #[test]
    fn sampling() {
        let space = build_knob_space(&conv2d());
        let configs = sample_configs(&space, 200, &mut seeded(1));
        let mut idx: Vec<_> = configs.iter().map(|c| space.config_index(c).unwrap()).collect();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 200);
        assert_eq!(sample_configs(&space, 1, &mut seeded(9)), sample_configs(&space, 1, &mut seeded(9)));

        let toy = KnobSpace::new(vec![
            KnobDef::new("a", vec![KnobValue::Int(1), KnobValue::Int(2)]).unwrap(),
            KnobDef::new("b", vec![KnobValue::Int(1), KnobValue::Int(2), KnobValue::Int(3)]).unwrap(),
        ]);
        let mut all: Vec<_> = sample_configs(&toy, 6, &mut seeded(3))
            .iter()
            .map(|c| toy.config_index(c).unwrap())
            .collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert_eq!(sample_configs(&toy, 9, &mut seeded(3)).len(), 9);
    }

    #[test]
    fn knob_def_rejects_unordered() {
        assert!(KnobDef::new("k", vec![]).is_err());
        assert!(KnobDef::new("k", vec![KnobValue::Int(2), KnobValue::Int(1)]).is_err());
        assert!(KnobDef::new("k", vec![KnobValue::Int(1), KnobValue::Int(1)]).is_err());
    }

    #[test]
    fn factorization_counts() {
        // 112 = 2^4 * 7 and 128 = 2^7 give the two large tile counts of the 2-D template.
        assert_eq!(factorizations(112, 4).len(), 140);
        assert_eq!(factorizations(128, 4).len(), 120);
        assert_eq!(factorizations(128, 2).len(), 8);
        assert_eq!(factorizations(3, 2).len(), 2);
        assert!(factorizations(60, 4).iter().all(|f| f.iter().product::<u32>() == 60));
    }

    #[test]
    fn same_type_nests_are_isomorphic() {
        let a = conv2d();
        let b = KernelSpec { input_size: 200, in_channels: 3, out_channels: 128, ..conv2d() };
        let sa = build_knob_space(&a);
        let sb = build_knob_space(&b);
        let na = lower_to_loop_nest(&a, &sa, &sa.index_config(7).unwrap()).unwrap();
        let nb = lower_to_loop_nest(&b, &sb, &sb.index_config(99_999).unwrap()).unwrap();
        assert_eq!(na.root.shape_key(), nb.root.shape_key());
        let ea: Vec<_> = na.loops().iter().map(|l| l.extent).collect();
        let eb: Vec<_> = nb.loops().iter().map(|l| l.extent).collect();
        assert_ne!(ea, eb);
    }

    #[test]
    fn unit_tiles_keep_loops() {
        let spec = conv2d();
        let space = build_knob_space(&spec);
        let nest = lower_to_loop_nest(&spec, &space, &space.index_config(0).unwrap()).unwrap();
        let loops = nest.loops();
        assert_eq!(loops.len(), 18);
        assert!(loops.iter().any(|l| l.extent == 1));
        assert!(loops.iter().filter(|l| l.annotations.reduction).count() == 6);
    }

    #[test]
    fn ceiling_split_covers_extent() {
        for input in [7u32, 13, 50, 224] {
            let spec = KernelSpec { input_size: input, stride: 3, ..conv2d() };
            let space = build_knob_space(&spec);
            let (xi, knob) = space.knob("tile_x").unwrap();
            let out = spec.output_size();
            for v in 0..knob.cardinality() as u32 {
                let mut cfg = space.index_config(0).unwrap();
                cfg.choices[xi] = v;
                let nest = lower_to_loop_nest(&spec, &space, &cfg).unwrap();
                let covered: u64 = nest
                    .loops()
                    .iter()
                    .filter(|l| l.axis() == Some("x"))
                    .map(|l| l.extent as u64)
                    .product();
                // direct division: at least ceil(out / inner) * inner
                let inner = nest.loops().iter().find(|l| l.axis_name.as_deref() == Some("x.3")).unwrap().extent as u64;
                assert!(covered >= out as u64);
                assert!(covered >= (out as u64).div_ceil(inner) * inner);
            }
        }
    }

    #[test]
    fn unroll_marks_inner_loops() {
        let spec = conv2d();
        let space = build_knob_space(&spec);
        let mut cfg = space.index_config(0).unwrap();
        let nest = lower_to_loop_nest(&spec, &space, &cfg).unwrap();
        assert!(nest.loops().iter().all(|l| !l.annotations.unrolled));
        cfg.choices[6] = 2;
        cfg.choices[7] = 1;
        let nest = lower_to_loop_nest(&spec, &space, &cfg).unwrap();
        let innermost = nest.loops().last().unwrap().annotations;
        assert!(innermost.unrolled);
        assert!(nest.loops()[0..9].iter().all(|l| !l.annotations.unrolled));
    }

    #[test]
    fn shapes_stable_per_type() {
        let mut rng = seeded(5);
        for op in OpType::ALL {
            let mut keys = std::collections::BTreeSet::new();
            for _ in 0..100 {
                let spec = KernelSpec {
                    op_type: op,
                    input_size: rng.gen_range(7..224),
                    in_channels: rng.gen_range(3..128),
                    out_channels: rng.gen_range(16..128),
                    kernel_size: 3,
                    stride: rng.gen_range(1..4),
                    padding: 1,
                };
                let space = build_knob_space(&spec);
                let cfg = sample_configs(&space, 1, &mut rng).remove(0);
                keys.insert(lower_to_loop_nest(&spec, &space, &cfg).unwrap().root.shape_key());
            }
            assert_eq!(keys.len(), 1, "{op}");
        }
    }

    #[test]
    fn output_sizes() {
        let s = KernelSpec { input_size: 7, stride: 3, ..conv2d() };
        assert_eq!(s.output_size(), 3);
        let t = KernelSpec { op_type: OpType::Transpose2d, input_size: 7, stride: 3, ..conv2d() };
        assert_eq!(t.output_size(), 19);
        assert!(KernelSpec { kernel_size: 0, ..conv2d() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn index_round_trip(index in 0u64..451_584_000) {
            let space = build_knob_space(&conv2d());
            let cfg = space.index_config(index).unwrap();
            prop_assert_eq!(space.config_index(&cfg).unwrap(), index);
        }
    }
}
