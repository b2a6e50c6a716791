//! The cost model: a two-layer GCN over the code graph, weighted-sum + max
//! aggregation into a fixed-length embedding, and a three-layer MLP head that
//! regresses normalized log2 GFLOPS. All gradients are computed by hand.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{graph_to_tensors, CodeGraph, GraphTensors, F};
use crate::linalg::{dot, Mat};

/// Floor used in place of zero GFLOPS for infeasible measurements.
pub const FLOOR_GFLOPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub gcn: Vec<usize>,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { gcn: vec![32, 32], head_hidden: 64 }
    }
}

impl ModelDims {
    pub fn embed_dim(&self) -> usize {
        *self.gcn.last().expect("at least one GCN layer")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    /// W_l with shape d_{l-1} × d_l; no biases.
    pub layers: Vec<Mat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggParams {
    pub sum_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// out × in
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows).map(|o| dot(self.w.row(o), x) + self.b[o]).collect()
    }

    fn zeros_like(&self) -> Dense {
        Dense { w: Mat::zeros(self.w.rows, self.w.cols), b: vec![0.0; self.b.len()] }
    }
}

/// Three affine layers; ReLU after the first two, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        FeatureNorm { mean: vec![0.0; F], std: vec![1.0; F] }
    }

    /// Per-slot statistics over a set of feature vectors; degenerate slots get std 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; F]>) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; F];
        let mut sq = [0.0; F];
        for r in rows {
            n += 1.0;
            for k in 0..F {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if n == 0.0 {
            return FeatureNorm::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = (0..F)
            .map(|k| {
                let var = (sq[k] / n - mean[k] * mean[k]).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-9 * (1.0 + mean[k].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        FeatureNorm { mean, std }
    }
}

/// Normalization of labels: z-score of log2 GFLOPS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    pub std: f64,
}

impl LabelNorm {
    pub fn identity() -> Self {
        LabelNorm { mean: 0.0, std: 1.0 }
    }

    pub fn fit(gflops: impl IntoIterator<Item = f64>) -> Self {
        let logs: Vec<f64> = gflops.into_iter().map(log2_gflops).collect();
        if logs.is_empty() {
            return LabelNorm::identity();
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        LabelNorm { mean, std: if var > 1e-18 { var.sqrt() } else { 1.0 } }
    }

    pub fn normalize(&self, gflops: f64) -> f64 {
        (log2_gflops(gflops) - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        (z * self.std + self.mean).exp2()
    }
}

/// log2 of GFLOPS with infeasible (zero) values floored.
pub fn log2_gflops(gflops: f64) -> f64 {
    gflops.max(FLOOR_GFLOPS).log2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub dims: ModelDims,
    pub gcn: GcnParams,
    pub agg: AggParams,
    pub head: HeadParams,
    pub feature_norm: FeatureNorm,
    pub label_norm: LabelNorm,
}

fn uniform_mat<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Mat {
    let s = 1.0 / (fan_in as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect())
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut layer = |i: usize, o: usize| {
            let w = uniform_mat(o, i, i, rng);
            let s = 1.0 / (i as f64).sqrt();
            let b = (0..o).map(|_| rng.gen_range(-s..s)).collect();
            Dense { w, b }
        };
        HeadParams { layers: vec![layer(input, hidden), layer(hidden, hidden), layer(hidden, 1)] }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.w.data);
            v.extend_from_slice(&l.b);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat head length");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.data.len();
            l.w.data.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.b.len();
            l.b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut h = self.clone();
        h.set_flat(flat);
        h
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn forward(&self, e: &[f64]) -> f64 {
        head_forward(self, e).0
    }
}

/// Activations kept for the backward and R-op passes.
struct HeadCache {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn head_forward(h: &HeadParams, e: &[f64]) -> (f64, HeadCache) {
    let z1 = h.layers[0].apply(e);
    let a1 = relu(&z1);
    let z2 = h.layers[1].apply(&a1);
    let a2 = relu(&z2);
    let y = h.layers[2].apply(&a2)[0];
    (y, HeadCache { z1, a1, z2, a2 })
}

/// Accumulates d(loss)/d(head) given dy; returns d(loss)/d(embedding).
fn head_backward(h: &HeadParams, e: &[f64], c: &HeadCache, dy: f64, g: &mut HeadParams) -> Vec<f64> {
    let [l1, l2, l3] = &h.layers[..] else { unreachable!("head has three layers") };
    let gl = &mut g.layers;
    for (j, a) in c.a2.iter().enumerate() {
        gl[2].w.data[j] += dy * a;
    }
    gl[2].b[0] += dy;
    let dz2: Vec<f64> = (0..c.z2.len()).map(|j| if c.z2[j] > 0.0 { dy * l3.w.data[j] } else { 0.0 }).collect();
    let mut da1 = vec![0.0; c.a1.len()];
    for (o, &d) in dz2.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gl[1].b[o] += d;
        let grow = gl[1].w.row_mut(o);
        for (gw, a) in grow.iter_mut().zip(&c.a1) {
            *gw += d * a;
        }
        for (da, w) in da1.iter_mut().zip(l2.w.row(o)) {
            *da += d * w;
        }
    }
    let mut de = vec![0.0; e.len()];
    for o in 0..c.z1.len() {
        if c.z1[o] <= 0.0 || da1[o] == 0.0 {
            continue;
        }
        let d = da1[o];
        gl[0].b[o] += d;
        for (gw, x) in gl[0].w.row_mut(o).iter_mut().zip(e) {
            *gw += d * x;
        }
        for (dx, w) in de.iter_mut().zip(l1.w.row(o)) {
            *dx += d * w;
        }
    }
    de
}

/// Mean squared error of the head over (embedding, normalized label) pairs.
pub fn head_loss(h: &HeadParams, batch: &[(Vec<f64>, f64)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch.iter().map(|(e, t)| (h.forward(e) - t).powi(2)).sum::<f64>() / batch.len() as f64
}

pub fn head_grad(h: &HeadParams, batch: &[(Vec<f64>, f64)]) -> Result<(f64, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let n = batch.len() as f64;
    let mut g = h.zeros_like();
    let mut loss = 0.0;
    for (e, t) in batch {
        let (y, c) = head_forward(h, e);
        loss += (y - t).powi(2);
        head_backward(h, e, &c, 2.0 * (y - t) / n, &mut g);
    }
    Ok((loss / n, g))
}

/// Hessian-vector product of the mean squared head loss, by forward-over-reverse
/// (R-operator) differentiation. ReLU second derivatives vanish almost everywhere.
pub fn head_hvp(h: &HeadParams, batch: &[(Vec<f64>, f64)], v: &HeadParams) -> Result<HeadParams> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let n = batch.len() as f64;
    let [_, w2, w3] = &h.layers[..] else { unreachable!() };
    let [v1, v2, v3] = &v.layers[..] else { unreachable!() };
    let mut out = h.zeros_like();
    for (e, t) in batch {
        let (y, c) = head_forward(h, e);
        let m1 = |j: usize| c.z1[j] > 0.0;
        let m2 = |j: usize| c.z2[j] > 0.0;
        // forward R pass
        let r_z1: Vec<f64> = (0..c.z1.len()).map(|o| dot(v1.w.row(o), e) + v1.b[o]).collect();
        let r_a1: Vec<f64> = (0..r_z1.len()).map(|j| if m1(j) { r_z1[j] } else { 0.0 }).collect();
        let r_z2: Vec<f64> =
            (0..c.z2.len()).map(|o| dot(v2.w.row(o), &c.a1) + dot(w2.w.row(o), &r_a1) + v2.b[o]).collect();
        let r_a2: Vec<f64> = (0..r_z2.len()).map(|j| if m2(j) { r_z2[j] } else { 0.0 }).collect();
        let r_y = dot(v3.w.row(0), &c.a2) + dot(w3.w.row(0), &r_a2) + v3.b[0];
        // backward pass and its R derivative
        let dy = 2.0 * (y - t) / n;
        let r_dy = 2.0 * r_y / n;
        let o = &mut out.layers;
        for j in 0..c.a2.len() {
            o[2].w.data[j] += r_dy * c.a2[j] + dy * r_a2[j];
        }
        o[2].b[0] += r_dy;
        let dz2: Vec<f64> = (0..c.z2.len()).map(|j| if m2(j) { dy * w3.w.data[j] } else { 0.0 }).collect();
        let r_dz2: Vec<f64> = (0..c.z2.len())
            .map(|j| if m2(j) { r_dy * w3.w.data[j] + dy * v3.w.data[j] } else { 0.0 })
            .collect();
        let mut da1 = vec![0.0; c.a1.len()];
        let mut r_da1 = vec![0.0; c.a1.len()];
        for k in 0..c.z2.len() {
            o[1].b[k] += r_dz2[k];
            let row = o[1].w.row_mut(k);
            for j in 0..c.a1.len() {
                row[j] += r_dz2[k] * c.a1[j] + dz2[k] * r_a1[j];
            }
            for j in 0..c.a1.len() {
                da1[j] += dz2[k] * w2.w[(k, j)];
                r_da1[j] += r_dz2[k] * w2.w[(k, j)] + dz2[k] * v2.w[(k, j)];
            }
        }
        let _ = da1;
        for j in 0..c.z1.len() {
            if !m1(j) {
                continue;
            }
            o[0].b[j] += r_da1[j];
            for (ow, x) in o[0].w.row_mut(j).iter_mut().zip(e.iter()) {
                *ow += r_da1[j] * x;
            }
        }
    }
    Ok(out)
}

/// Graph tensors with normalized features, ready for the GCN.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub x: Mat,
    pub adj: Vec<Vec<(usize, f64)>>,
}

/// Which parameters a gradient covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    HeadOnly,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub gcn: Vec<Mat>,
    pub agg: Vec<f64>,
    pub head: HeadParams,
}

impl Gradients {
    /// Same layout as [`ModelState::params_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.gcn.iter().flat_map(|w| w.data.iter().copied()).collect();
        v.extend_from_slice(&self.agg);
        v.extend(self.head.to_flat());
        v
    }
}

/// Sparse Â·M for a row-wise sparse Â.
fn spmm(adj: &[Vec<(usize, f64)>], m: &Mat) -> Mat {
    let mut out = Mat::zeros(adj.len(), m.cols);
    for (i, row) in adj.iter().enumerate() {
        let orow = &mut out.data[i * m.cols..(i + 1) * m.cols];
        for &(j, a) in row {
            for (o, v) in orow.iter_mut().zip(m.row(j)) {
                *o += a * v;
            }
        }
    }
    out
}

fn gcn_layers(x: &Mat, adj: &[Vec<(usize, f64)>], p: &GcnParams) -> Vec<(Mat, Mat)> {
    // (input H_{l-1}, pre-activation Z_l) per layer
    let mut out = Vec::with_capacity(p.layers.len());
    let mut h = x.clone();
    for w in &p.layers {
        let z = spmm(adj, &h.matmul(w));
        let next = Mat::from_vec(z.rows, z.cols, relu(&z.data));
        out.push((h, z));
        h = next;
    }
    out.push((h, Mat::zeros(0, 0)));
    out
}

/// H_l = ReLU(Â H_{l-1} W_l), returning the last layer's node embeddings.
pub fn gcn_forward(t: &GraphTensors, p: &GcnParams) -> Result<Mat> {
    let d0 = p.layers.first().map(|w| w.rows).unwrap_or(F);
    if t.feature_matrix.cols != d0 {
        return Err(Error::domain(format!("feature width {} != {d0}", t.feature_matrix.cols)));
    }
    for pair in p.layers.windows(2) {
        if pair[0].cols != pair[1].rows {
            return Err(Error::domain("GCN layer widths do not chain"));
        }
    }
    let adj = t.sparse_adjacency();
    Ok(gcn_layers(&t.feature_matrix, &adj, p).pop().unwrap().0)
}

/// Channelwise weighted sum over nodes, concatenated with the channelwise max.
pub fn aggregate(h: &Mat, a: &AggParams) -> Result<Vec<f64>> {
    if h.rows == 0 {
        return Err(Error::domain("cannot aggregate an empty node set"));
    }
    if h.cols != a.sum_weights.len() {
        return Err(Error::domain("embedding width does not match aggregation weights"));
    }
    let d = h.cols;
    let mut out = vec![0.0; 2 * d];
    out[d..].copy_from_slice(h.row(0));
    for n in 0..h.rows {
        for (c, &v) in h.row(n).iter().enumerate() {
            out[c] += a.sum_weights[c] * v;
            if v > out[d + c] {
                out[d + c] = v;
            }
        }
    }
    Ok(out)
}

impl ModelState {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut prev = F;
        let mut layers = Vec::new();
        for &d in &dims.gcn {
            layers.push(uniform_mat(prev, d, prev, rng));
            prev = d;
        }
        let agg = AggParams { sum_weights: vec![1.0; prev] };
        let head = HeadParams::init(2 * prev, dims.head_hidden, rng);
        ModelState {
            dims,
            gcn: GcnParams { layers },
            agg,
            head,
            feature_norm: FeatureNorm::identity(),
            label_norm: LabelNorm::identity(),
        }
    }

    /// A new randomly initialised head for the same embedding.
    pub fn fresh_head<R: Rng + ?Sized>(&self, rng: &mut R) -> HeadParams {
        HeadParams::init(2 * self.dims.embed_dim(), self.dims.head_hidden, rng)
    }

    pub fn prepare(&self, g: &CodeGraph) -> PreparedGraph {
        let t = graph_to_tensors(g);
        self.prepare_tensors(&t)
    }

    pub fn prepare_tensors(&self, t: &GraphTensors) -> PreparedGraph {
        let mut x = t.feature_matrix.clone();
        for (i, &has) in t.featured.iter().enumerate() {
            let row = x.row_mut(i);
            if has {
                for k in 0..F {
                    row[k] = (row[k] - self.feature_norm.mean[k]) / self.feature_norm.std[k];
                }
            } else {
                row.fill(0.0);
            }
        }
        PreparedGraph { x, adj: t.sparse_adjacency() }
    }

    pub fn embed_prepared(&self, p: &PreparedGraph) -> Vec<f64> {
        let h = gcn_layers(&p.x, &p.adj, &self.gcn).pop().unwrap().0;
        aggregate(&h, &self.agg).expect("dimensions fixed at construction")
    }

    /// Fixed-length graph embedding fed to the head.
    pub fn embed(&self, g: &CodeGraph) -> Result<Vec<f64>> {
        if g.nodes.is_empty() {
            return Err(Error::domain("graph has no nodes"));
        }
        Ok(self.embed_prepared(&self.prepare(g)))
    }

    /// Prediction on the normalized log2 scale.
    pub fn forward(&self, g: &CodeGraph) -> Result<f64> {
        Ok(self.head.forward(&self.embed(g)?))
    }

    pub fn predict_gflops(&self, g: &CodeGraph) -> Result<f64> {
        Ok(self.label_norm.denormalize(self.forward(g)?))
    }

    /// Mean squared error on the normalized scale and its exact gradient.
    pub fn grad(&self, batch: &[(CodeGraph, f64)], scope: GradScope) -> Result<(f64, Gradients)> {
        let prepared: Vec<(PreparedGraph, f64)> = batch.iter().map(|(g, t)| (self.prepare(g), *t)).collect();
        self.grad_prepared(&prepared, scope)
    }

    pub fn grad_prepared(&self, batch: &[(PreparedGraph, f64)], scope: GradScope) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let n = batch.len() as f64;
        let mut g = self.zero_grads();
        let mut loss = 0.0;
        let d = self.dims.embed_dim();
        for (p, t) in batch {
            let acts = gcn_layers(&p.x, &p.adj, &self.gcn);
            let h = &acts.last().unwrap().0;
            let e = aggregate(h, &self.agg)?;
            let (y, cache) = head_forward(&self.head, &e);
            loss += (y - t).powi(2);
            let de = head_backward(&self.head, &e, &cache, 2.0 * (y - t) / n, &mut g.head);
            if scope == GradScope::HeadOnly {
                continue;
            }
            // aggregation
            let mut dh = Mat::zeros(h.rows, d);
            for c in 0..d {
                let ds = de[c];
                let mut colsum = 0.0;
                let mut arg = 0;
                for r in 0..h.rows {
                    colsum += h[(r, c)];
                    dh[(r, c)] += self.agg.sum_weights[c] * ds;
                    if h[(r, c)] > h[(arg, c)] {
                        arg = r;
                    }
                }
                g.agg[c] += ds * colsum;
                dh[(arg, c)] += de[d + c];
            }
            // GCN layers, last to first
            let mut dout = dh;
            for l in (0..self.gcn.layers.len()).rev() {
                let (input, z) = &acts[l];
                let mut dz = dout;
                for (dv, zv) in dz.data.iter_mut().zip(&z.data) {
                    if *zv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                // Z = Â (H W), Â symmetric
                let dhw = spmm(&p.adj, &dz);
                let dw = input.t_matmul(&dhw);
                for (a, b) in g.gcn[l].data.iter_mut().zip(&dw.data) {
                    *a += b;
                }
                dout = dhw.matmul_t(&self.gcn.layers[l]);
            }
        }
        Ok((loss / n, g))
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            gcn: self.gcn.layers.iter().map(|w| Mat::zeros(w.rows, w.cols)).collect(),
            agg: vec![0.0; self.agg.sum_weights.len()],
            head: self.head.zeros_like(),
        }
    }

    /// All trainable parameters, flattened (GCN layers, aggregation, head).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for w in &self.gcn.layers {
            v.extend_from_slice(&w.data);
        }
        v.extend_from_slice(&self.agg.sum_weights);
        v.extend(self.head.to_flat());
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for w in &mut self.gcn.layers {
            let n = w.data.len();
            w.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let n = self.agg.sum_weights.len();
        self.agg.sum_weights.copy_from_slice(&flat[off..off + n]);
        off += n;
        self.head.set_flat(&flat[off..]);
    }

    /// θ ← θ − lr·g over all parameters.
    pub fn sgd_step(&mut self, g: &Gradients, lr: f64) -> Result<()> {
        if g.gcn.len() != self.gcn.layers.len() || g.agg.len() != self.agg.sum_weights.len() {
            return Err(Error::domain("gradient shape does not match model"));
        }
        for (w, gw) in self.gcn.layers.iter_mut().zip(&g.gcn) {
            if w.data.len() != gw.data.len() {
                return Err(Error::domain("gradient shape does not match model"));
            }
            for (a, b) in w.data.iter_mut().zip(&gw.data) {
                *a -= lr * b;
            }
        }
        for (a, b) in self.agg.sum_weights.iter_mut().zip(&g.agg) {
            *a -= lr * b;
        }
        self.head = sgd_step(&self.head, &g.head, lr)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self.clone() };
        serde_json::to_vec(&ck).expect("model serializes")
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        Ok(ck.model)
    }
}

const CHECKPOINT_FORMAT: &str = "graphtune-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelState,
}

pub fn mse(pred: &[f64], label: &[f64]) -> f64 {
    pred.iter().zip(label).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

/// p − lr·g elementwise over head parameters.
pub fn sgd_step(p: &HeadParams, g: &HeadParams, lr: f64) -> Result<HeadParams> {
    if p.layers.len() != g.layers.len()
        || p.layers.iter().zip(&g.layers).any(|(a, b)| a.w.data.len() != b.w.data.len() || a.b.len() != b.b.len())
    {
        return Err(Error::domain("gradient shape does not match parameters"));
    }
    let mut out = p.clone();
    for (l, gl) in out.layers.iter_mut().zip(&g.layers) {
        for (a, b) in l.w.data.iter_mut().zip(&gl.w.data) {
            *a -= lr * b;
        }
        for (a, b) in l.b.iter_mut().zip(&gl.b) {
            *a -= lr * b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphNode, NodeKind};
    use crate::rng::seeded;

    fn tiny_graph() -> CodeGraph {
        let mut nodes = vec![GraphNode { kind: NodeKind::Root, feature: None, template_slot: None }];
        let mut edges = vec![];
        for i in 0..2 {
            nodes.push(GraphNode { kind: NodeKind::For, feature: None, template_slot: None });
            let f: [f64; F] = std::array::from_fn(|k| ((i * F + k) as f64 * 0.37).sin());
            nodes.push(GraphNode { kind: NodeKind::Iterval, feature: Some(f), template_slot: None });
            edges.push((0, 1 + 2 * i));
            edges.push((1 + 2 * i, 2 + 2 * i));
        }
        CodeGraph { nodes, edges, label: None }
    }

    #[test]
    fn zero_features_give_zero_embeddings() {
        let m = ModelState::init(ModelDims::default(), &mut seeded(1));
        let t = graph_to_tensors(&tiny_graph());
        let zero = GraphTensors { feature_matrix: Mat::zeros(5, F), ..t };
        let h = gcn_forward(&zero, &m.gcn).unwrap();
        assert!(h.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_node_identity_weights() {
        let mut w1 = Mat::zeros(F, F);
        for i in 0..F {
            w1[(i, i)] = 1.0;
        }
        let p = GcnParams { layers: vec![w1.clone(), w1] };
        let x: Vec<f64> = (0..F).map(|k| k as f64 + 0.5).collect();
        let t = GraphTensors {
            feature_matrix: Mat::from_vec(1, F, x.clone()),
            featured: vec![true],
            normalized_adjacency: Mat::identity(1),
        };
        assert_eq!(gcn_forward(&t, &p).unwrap().data, x);
    }

    #[test]
    fn gcn_rejects_wrong_width() {
        let m = ModelState::init(ModelDims::default(), &mut seeded(1));
        let t = GraphTensors {
            feature_matrix: Mat::zeros(1, 3),
            featured: vec![true],
            normalized_adjacency: Mat::identity(1),
        };
        assert!(gcn_forward(&t, &m.gcn).is_err());
    }

    #[test]
    fn aggregate_definition() {
        let a = AggParams { sum_weights: vec![2.0, 0.5] };
        let h = Mat::from_vec(1, 2, vec![3.0, -1.0]);
        assert_eq!(aggregate(&h, &a).unwrap(), vec![6.0, -0.5, 3.0, -1.0]);
        let ones = AggParams { sum_weights: vec![1.0, 1.0] };
        let h2 = Mat::from_vec(2, 2, vec![3.0, 1.0, 3.0, 1.0]);
        assert_eq!(aggregate(&h2, &ones).unwrap(), vec![6.0, 2.0, 3.0, 1.0]);
        assert!(aggregate(&Mat::zeros(0, 2), &ones).is_err());
    }

    #[test]
    fn zero_model_predicts_final_bias() {
        let mut m = ModelState::init(ModelDims::default(), &mut seeded(2));
        let zeros = vec![0.0; m.params_flat().len()];
        m.set_params_flat(&zeros);
        m.head.layers[2].b[0] = 0.75;
        assert_eq!(m.forward(&tiny_graph()).unwrap(), 0.75);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ModelState::init(ModelDims::default(), &mut seeded(3));
        let g = tiny_graph();
        assert_eq!(m.forward(&g).unwrap().to_bits(), m.forward(&g).unwrap().to_bits());
    }

    #[test]
    fn perfect_predictions_have_zero_gradient() {
        let m = ModelState::init(ModelDims::default(), &mut seeded(4));
        let g = tiny_graph();
        let y = m.forward(&g).unwrap();
        let (loss, grads) = m.grad(&[(g, y)], GradScope::All).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.head.to_flat().iter().all(|v| *v == 0.0));
        assert!(grads.agg.iter().all(|v| *v == 0.0));
        assert!(m.grad(&[], GradScope::All).is_err());
    }

    #[test]
    fn linear_head_closed_form() {
        // one hidden unit per layer, identity pass-through: y = w3 * relu(w2 * relu(w1 x))
        let mut h = HeadParams::init(1, 1, &mut seeded(5));
        for l in &mut h.layers {
            l.w.data[0] = 1.0;
            l.b[0] = 0.0;
        }
        h.layers[2].w.data[0] = 0.5;
        let x = 3.0;
        let (_, g) = head_grad(&h, &[(vec![x], 1.0)]).unwrap();
        // d/dw3 of (w3*x - y)^2 = 2 (pred - label) * input
        assert_eq!(g.layers[2].w.data[0], 2.0 * (0.5 * x - 1.0) * x);
    }

    #[test]
    fn head_only_scope_leaves_embedding_grads_zero() {
        let m = ModelState::init(ModelDims::default(), &mut seeded(6));
        let (_, g) = m.grad(&[(tiny_graph(), 3.0)], GradScope::HeadOnly).unwrap();
        assert!(g.gcn.iter().all(|w| w.data.iter().all(|v| *v == 0.0)));
        assert!(g.agg.iter().all(|v| *v == 0.0));
        assert!(g.head.to_flat().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = HeadParams::init(1, 1, &mut seeded(7));
        for l in &mut p.layers {
            l.w.data[0] = 1.0;
            l.b[0] = 1.0;
        }
        let mut g = p.zeros_like();
        assert_eq!(sgd_step(&p, &g, 0.1).unwrap(), p);
        for l in &mut g.layers {
            l.w.data[0] = 0.5;
            l.b[0] = 0.5;
        }
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let q = sgd_step(&p, &g, 0.1).unwrap();
        assert!(q.to_flat().iter().all(|v| *v == 0.95));
        let other = HeadParams::init(2, 1, &mut seeded(7));
        assert!(sgd_step(&p, &other, 0.1).is_err());
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let h = HeadParams::init(4, 5, &mut seeded(8));
        let mut rng = seeded(9);
        let batch: Vec<(Vec<f64>, f64)> =
            (0..3).map(|_| ((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-1.0..1.0))).collect();
        let v_flat: Vec<f64> = (0..h.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = h.with_flat(&v_flat);
        let hv = head_hvp(&h, &batch, &v).unwrap().to_flat();
        let eps = 1e-6;
        let p = h.to_flat();
        let shift = |s: f64| {
            let q: Vec<f64> = p.iter().zip(&v_flat).map(|(a, b)| a + s * b).collect();
            head_grad(&h.with_flat(&q), &batch).unwrap().1.to_flat()
        };
        let (gp, gm) = (shift(eps), shift(-eps));
        for i in 0..hv.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * eps);
            assert!((fd - hv[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", hv[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = ModelState::init(ModelDims::default(), &mut seeded(10));
        m.feature_norm = FeatureNorm { mean: (0..F).map(|k| k as f64 / 3.0).collect(), std: vec![0.1; F] };
        m.label_norm = LabelNorm { mean: 7.123456789, std: 1.0 / 3.0 };
        let back = ModelState::from_checkpoint_bytes(&m.to_checkpoint_bytes()).unwrap();
        let bits = |m: &ModelState| m.params_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back, m);
    }

    #[test]
    fn label_norm_round_trip() {
        let n = LabelNorm::fit([1.0, 2.0, 4.0, 8.0]);
        assert!((n.mean - 1.5).abs() < 1e-12);
        assert!((n.denormalize(n.normalize(3.0)) - 3.0).abs() < 1e-12);
        assert_eq!(log2_gflops(0.0), FLOOR_GFLOPS.log2());
    }
}
