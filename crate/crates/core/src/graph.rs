//! Loop nests as root/for/iterval graphs, and the super-graph template that
//! gives every operation type one common graph shape.
//!
//! A graph has one `root`, one `for` node per loop (control-flow edge from the
//! root) and one `iterval` node per loop carrying the loop context vector
//! (edge from its `for` node). Only iterval nodes have features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AstNode, KernelSpec, LoopNest, OpType};
use crate::linalg::Mat;

/// Loop context vector length.
pub const F: usize = 12;

pub const FEATURE_NAMES: [&str; F] = [
    "extent",
    "log2_extent",
    "tile_level",
    "is_reduction",
    "is_unrolled",
    "stride_hint",
    "touched_elements_estimate",
    "log2_touched",
    "arithmetic_ops_estimate",
    "log2_arith",
    "loop_depth",
    "normalized_position",
];

pub type LoopContextVector = [f64; F];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    For,
    Iterval,
}

impl NodeKind {
    fn as_str(self) -> &'static str {
        match self {
            NodeKind::Root => "root",
            NodeKind::For => "for",
            NodeKind::Iterval => "iterval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub feature: Option<LoopContextVector>,
    pub template_slot: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
    /// Measured performance in GFLOPS, when known.
    pub label: Option<f64>,
}

fn log2_clamped(v: f64) -> f64 {
    if v > 1.0 {
        v.log2()
    } else {
        0.0
    }
}

/// Input-tensor stride (in elements) of one step along an axis.
fn access_stride(spec: &KernelSpec, axis: &str) -> f64 {
    let w = spec.input_size as f64;
    let s = if spec.op_type.is_transposed() { 1.0 } else { spec.stride as f64 };
    let plane = if spec.op_type.is_1d() { w } else { w * w };
    match axis {
        "x" => s,
        "y" => s * w,
        "f" if spec.op_type == OpType::Depthwise => plane,
        "f" => 0.0,
        "rc" => plane,
        "ry" => w,
        _ => 1.0,
    }
}

/// Elements of input, weight and output touched by a loop subtree whose
/// per-axis coverage is `cover`.
fn footprint(spec: &KernelSpec, cover: &BTreeMap<&str, f64>) -> f64 {
    let c = |a: &str| cover.get(a).copied().unwrap_or(1.0);
    let s = if spec.op_type.is_transposed() { 1.0 } else { spec.stride as f64 };
    let span_x = (c("x") - 1.0) * s + c("rx");
    let span_y = if spec.op_type.is_1d() { 1.0 } else { (c("y") - 1.0) * s + c("ry") };
    let out = c("f") * c("y") * c("x");
    match spec.op_type {
        OpType::Depthwise => out + c("f") * span_y * span_x + c("f") * c("ry") * c("rx"),
        OpType::Winograd => out + c("rc") * span_y * span_x + c("f") * c("rc") * c("eps") * c("nu"),
        _ => out + c("rc") * span_y * span_x + c("f") * c("rc") * c("ry") * c("rx"),
    }
}

/// Loop context vectors of every loop of a nest, in pre-order.
pub fn loop_features(nest: &LoopNest) -> Vec<LoopContextVector> {
    let loops = nest.loops();
    let n = loops.len();
    let mut out = Vec::with_capacity(n);
    for (depth, l) in loops.iter().enumerate() {
        let mut cover: BTreeMap<&str, f64> = BTreeMap::new();
        let mut trip = 1.0;
        for inner in &loops[depth..] {
            *cover.entry(inner.axis().unwrap_or("")).or_insert(1.0) *= inner.extent as f64;
            trip *= inner.extent as f64;
        }
        let extent = l.extent as f64;
        let touched = footprint(&nest.spec, &cover);
        let arith = 2.0 * trip;
        out.push([
            extent,
            log2_clamped(extent),
            l.annotations.tile_level as f64,
            l.annotations.reduction as u8 as f64,
            l.annotations.unrolled as u8 as f64,
            access_stride(&nest.spec, l.axis().unwrap_or("")),
            touched,
            log2_clamped(touched),
            arith,
            log2_clamped(arith),
            depth as f64,
            if n > 1 { depth as f64 / (n - 1) as f64 } else { 0.0 },
        ]);
    }
    out
}

pub fn ast_to_graph(nest: &LoopNest) -> CodeGraph {
    let loops: Vec<&AstNode> = nest.loops();
    let features = loop_features(nest);
    let mut nodes = vec![GraphNode { kind: NodeKind::Root, feature: None, template_slot: None }];
    let mut edges = Vec::with_capacity(2 * loops.len());
    for (l, feat) in loops.iter().zip(features) {
        let slot = l.axis_name.clone();
        let for_idx = nodes.len();
        nodes.push(GraphNode { kind: NodeKind::For, feature: None, template_slot: slot.clone() });
        nodes.push(GraphNode { kind: NodeKind::Iterval, feature: Some(feat), template_slot: slot });
        edges.push((0, for_idx));
        edges.push((for_idx, for_idx + 1));
    }
    CodeGraph { nodes, edges, label: None }
}

/// Loop names of an operation type's template, in pre-order. Names do not
/// depend on kernel dimensions.
pub fn template_loop_names(op: OpType) -> Vec<String> {
    let spec = KernelSpec {
        op_type: op,
        input_size: 16,
        in_channels: 8,
        out_channels: 8,
        kernel_size: 3,
        stride: 1,
        padding: 1,
    };
    let axes = spec.axes();
    crate::kernel::loop_order(&axes)
        .into_iter()
        .map(|(a, l)| format!("{}.{}", axes[a].name, l))
        .collect()
}

/// Union of the graph shapes of a set of operation types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperGraphTemplate {
    pub op_types: Vec<OpType>,
    /// Placeholder identifiers in template order.
    pub slots: Vec<String>,
    /// (op_type, loop name) → placeholder identifier.
    pub mapping_table: BTreeMap<(OpType, String), String>,
    /// Template graph: every iterval node is a null placeholder.
    pub graph: CodeGraph,
}

pub fn build_super_template(op_types: &[OpType]) -> Result<SuperGraphTemplate> {
    if op_types.is_empty() {
        return Err(Error::domain("super-graph template needs at least one op_type"));
    }
    let mut ops = op_types.to_vec();
    ops.sort();
    ops.dedup();
    let mut slots: Vec<String> = Vec::new();
    let mut mapping_table = BTreeMap::new();
    for &op in &ops {
        for name in template_loop_names(op) {
            if !slots.contains(&name) {
                slots.push(name.clone());
            }
            mapping_table.insert((op, name.clone()), name);
        }
    }
    let mut nodes = vec![GraphNode { kind: NodeKind::Root, feature: None, template_slot: None }];
    let mut edges = Vec::new();
    for s in &slots {
        let f = nodes.len();
        nodes.push(GraphNode { kind: NodeKind::For, feature: None, template_slot: Some(s.clone()) });
        nodes.push(GraphNode { kind: NodeKind::Iterval, feature: None, template_slot: Some(s.clone()) });
        edges.push((0, f));
        edges.push((f, f + 1));
    }
    Ok(SuperGraphTemplate {
        op_types: ops,
        slots,
        mapping_table,
        graph: CodeGraph { nodes, edges, label: None },
    })
}

impl SuperGraphTemplate {
    /// Template over every supported operation type.
    pub fn all() -> SuperGraphTemplate {
        build_super_template(&OpType::ALL).expect("all op types are supported")
    }

    fn iterval_index(&self, slot: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == slot).map(|i| 2 + 2 * i)
    }
}

/// Embeds a graph into the template: matched iterval placeholders receive the
/// source features, all others stay null.
pub fn augment_to_super(graph: &CodeGraph, template: &SuperGraphTemplate, op_type: OpType) -> Result<CodeGraph> {
    if !template.op_types.contains(&op_type) {
        return Err(Error::domain(format!("template does not cover {op_type}")));
    }
    let mut out = template.graph.clone();
    out.label = graph.label;
    for node in graph.nodes.iter().filter(|n| n.kind == NodeKind::Iterval) {
        let slot = node
            .template_slot
            .as_ref()
            .ok_or_else(|| Error::domain("iterval node without a slot"))?;
        let target = template
            .mapping_table
            .get(&(op_type, slot.clone()))
            .ok_or_else(|| Error::domain(format!("no template entry for ({op_type}, {slot})")))?;
        let idx = template.iterval_index(target).expect("mapping targets are template slots");
        out.nodes[idx].feature = node.feature;
    }
    Ok(out)
}

/// Dense tensors consumed by the GCN.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors {
    /// num_nodes × F, zero rows for featureless nodes.
    pub feature_matrix: Mat,
    /// Which rows carry a real feature vector.
    pub featured: Vec<bool>,
    /// D^-1/2 (A + I) D^-1/2 with A the symmetrised adjacency.
    pub normalized_adjacency: Mat,
}

impl GraphTensors {
    pub fn num_nodes(&self) -> usize {
        self.featured.len()
    }

    /// Non-zero entries of the normalized adjacency, per row.
    pub fn sparse_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let a = &self.normalized_adjacency;
        (0..a.rows)
            .map(|i| {
                a.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect()
            })
            .collect()
    }
}

pub fn graph_to_tensors(graph: &CodeGraph) -> GraphTensors {
    let n = graph.nodes.len();
    let mut x = Mat::zeros(n, F);
    let mut featured = vec![false; n];
    for (i, node) in graph.nodes.iter().enumerate() {
        if let Some(f) = &node.feature {
            x.row_mut(i).copy_from_slice(f);
            featured[i] = true;
        }
    }
    let mut a = Mat::identity(n);
    for &(s, d) in &graph.edges {
        if s != d {
            a[(s, d)] = 1.0;
            a[(d, s)] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum::<f64>()).collect();
    for i in 0..n {
        for j in 0..n {
            if a[(i, j)] != 0.0 {
                a[(i, j)] /= (deg[i] * deg[j]).sqrt();
            }
        }
    }
    GraphTensors { feature_matrix: x, featured, normalized_adjacency: a }
}

impl CodeGraph {
    /// Line-oriented text encoding.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "codegraph 1").unwrap();
        writeln!(s, "nodes {} features {}", self.nodes.len(), F).unwrap();
        for n in &self.nodes {
            write!(s, "node {} {}", n.kind.as_str(), n.template_slot.as_deref().unwrap_or("-")).unwrap();
            match &n.feature {
                Some(f) => {
                    for v in f {
                        write!(s, " {v}").unwrap();
                    }
                }
                None => s.push_str(" null"),
            }
            s.push('\n');
        }
        for (a, b) in &self.edges {
            writeln!(s, "edge {a} {b}").unwrap();
        }
        if let Some(l) = self.label {
            writeln!(s, "label {l}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CodeGraph> {
        let perr = |line: usize, msg: &str| Error::Parse(format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, "codegraph 1")) => {}
            Some((i, _)) => return Err(perr(i, "expected `codegraph 1` header")),
            None => return Err(Error::Parse("empty graph file".into())),
        }
        let (i, header) = lines.next().ok_or_else(|| Error::Parse("missing node header".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "nodes" || h[2] != "features" {
            return Err(perr(i, "expected `nodes <n> features <F>`"));
        }
        let count: usize = h[1].parse().map_err(|_| perr(i, "bad node count"))?;
        if h[3] != F.to_string() {
            return Err(perr(i, "unsupported feature width"));
        }
        let mut g = CodeGraph { nodes: Vec::with_capacity(count), edges: Vec::new(), label: None };
        for (i, line) in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t[0] {
                "node" => {
                    if t.len() < 4 {
                        return Err(perr(i, "short node line"));
                    }
                    let kind = match t[1] {
                        "root" => NodeKind::Root,
                        "for" => NodeKind::For,
                        "iterval" => NodeKind::Iterval,
                        _ => return Err(perr(i, "unknown node kind")),
                    };
                    let template_slot = (t[2] != "-").then(|| t[2].to_string());
                    let feature = if t[3] == "null" && t.len() == 4 {
                        None
                    } else if t.len() == 3 + F {
                        let mut f = [0.0; F];
                        for (slot, tok) in f.iter_mut().zip(&t[3..]) {
                            *slot = tok.parse().map_err(|_| perr(i, "bad feature value"))?;
                        }
                        Some(f)
                    } else {
                        return Err(perr(i, "feature must be `null` or 12 numbers"));
                    };
                    g.nodes.push(GraphNode { kind, feature, template_slot });
                }
                "edge" if t.len() == 3 => {
                    let a: usize = t[1].parse().map_err(|_| perr(i, "bad edge"))?;
                    let b: usize = t[2].parse().map_err(|_| perr(i, "bad edge"))?;
                    if a >= count || b >= count {
                        return Err(perr(i, "edge endpoint out of range"));
                    }
                    g.edges.push((a, b));
                }
                "label" if t.len() == 2 => {
                    g.label = Some(t[1].parse().map_err(|_| perr(i, "bad label"))?);
                }
                _ => return Err(perr(i, "unrecognised line")),
            }
        }
        if g.nodes.len() != count {
            return Err(Error::Parse(format!("header says {count} nodes, found {}", g.nodes.len())));
        }
        Ok(g)
    }

    /// Non-null feature vectors, sorted, for multiset comparison.
    pub fn feature_multiset(&self) -> Vec<LoopContextVector> {
        let mut v: Vec<LoopContextVector> = self.nodes.iter().filter_map(|n| n.feature).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
        v
    }
}

/// Lowers and encodes a (kernel, config) pair, optionally augmented.
pub fn encode(nest: &LoopNest, template: Option<&SuperGraphTemplate>) -> Result<CodeGraph> {
    let g = ast_to_graph(nest);
    match template {
        Some(t) => augment_to_super(&g, t, nest.spec.op_type),
        None => Ok(g),
    }
}
