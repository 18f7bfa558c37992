//! Reverse-mode tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node list
//! is already in topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeometry};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity blended into running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    GatedSoftmax { logits: Var, gate: Var, exp_shifted: Vec<f64>, denom: Vec<f64> },
    RelationAggregate { weights: Var, values: Var },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry, batch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Concat { parts: Vec<Var>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, inner: usize, src_len: usize, start: usize, len: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SmoothL1(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter name, summed over every leaf bound to that name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, idx) in &self.params {
            let Some(g) = &self.grads[*idx] else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].tracked {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters are recorded as constants; `backward` yields nothing useful.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        value.requires_grad = tracked;
        value.grad = None;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.tracked(v))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        let tracked = !self.no_grad;
        self.push(t, Op::Leaf, tracked)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let tracked = !self.no_grad && t.requires_grad;
        self.push(t.clone(), Op::Param(name.to_string()), tracked)
    }

    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name).ok_or_else(|| Error::contract(format!("parameter {name:?} missing from store")))?;
        Ok(self.param(name, t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.any_tracked(&[a, b]);
        self.push(Tensor::new(&shape, data).expect("shape preserved"), op, tracked)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(Tensor::new(&shape, data).expect("shape preserved"), op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x[m×n] + b[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.iter().product::<usize>() != sx[1] {
            return Err(Error::dim(format!("row bias {sb:?} for {sx:?}")));
        }
        let n = sx[1];
        let bias = self.value(b).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let shape = sx.to_vec();
        let tracked = self.any_tracked(&[x, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddRowBias(x, b), tracked))
    }

    /// Per-channel bias for `[C×H×W]` or `[B×C×H×W]` maps.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        let c_axis = match sx.len() {
            3 => 0,
            4 => 1,
            _ => return Err(Error::dim(format!("channel bias needs rank 3 or 4, got {sx:?}"))),
        };
        let c = sx[c_axis];
        if sb.iter().product::<usize>() != c {
            return Err(Error::dim(format!("channel bias {sb:?} for {sx:?}")));
        }
        let plane: usize = sx[c_axis + 1..].iter().product();
        let bias = self.value(b).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bias[(i / plane) % c]).collect();
        let tracked = self.any_tracked(&[x, b]);
        Ok(self.push(Tensor::new(&sx, data)?, Op::AddChannelBias(x, b), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, len, inner }, tracked))
    }

    /// Column-normalised gated softmax over a square `[N×N]` logit matrix:
    /// `w[m][n] = g[m][n]·exp(a[m][n]) / Σ_k g[k][n]·exp(a[k][n])`.
    ///
    /// A column whose gates are all zero produces an all-zero column.
    pub fn gated_softmax(&mut self, logits: Var, gate: Var) -> Result<Var> {
        self.same_shape(logits, gate, "gated softmax")?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("gated softmax needs rank 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let a = self.value(logits).data();
        let g = self.value(gate).data();
        if g.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("gate values must be non-negative"));
        }
        let mut exp_shifted = vec![0.0; a.len()];
        let mut out = vec![0.0; a.len()];
        let mut denom = vec![0.0; cols];
        let mut terms = vec![0.0; rows];
        for n in 0..cols {
            let shift = (0..rows).filter(|&m| g[m * cols + n] > 0.0).map(|m| a[m * cols + n]).fold(f64::NEG_INFINITY, f64::max);
            if shift == f64::NEG_INFINITY {
                continue;
            }
            for m in 0..rows {
                let e = (a[m * cols + n] - shift).exp();
                exp_shifted[m * cols + n] = e;
                terms[m] = g[m * cols + n] * e;
            }
            let total = kernels::order_free_sum(&mut terms.clone());
            denom[n] = total;
            if total > 0.0 {
                for m in 0..rows {
                    out[m * cols + n] = terms[m] / total;
                }
            }
        }
        let tracked = self.any_tracked(&[logits, gate]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GatedSoftmax { logits, gate, exp_shifted, denom }, tracked))
    }

    /// `out[n] = Σ_m weights[m][n] · values[m]`, summed independently of object order.
    pub fn relation_aggregate(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(weights).to_vec(), self.shape(values).to_vec());
        if sw.len() != 2 || sv.len() != 2 || sw[0] != sv[0] {
            return Err(Error::dim(format!("relation aggregate of {sw:?} and {sv:?}")));
        }
        let (src, tgt, d) = (sw[0], sw[1], sv[1]);
        let w = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; tgt * d];
        let mut terms = vec![0.0; src];
        for n in 0..tgt {
            for j in 0..d {
                for m in 0..src {
                    terms[m] = w[m * tgt + n] * v[m * d + j];
                }
                out[n * d + j] = kernels::order_free_sum(&mut terms);
            }
        }
        let tracked = self.any_tracked(&[weights, values]);
        Ok(self.push(Tensor::new(&[tgt, d], out)?, Op::RelationAggregate { weights, values }, tracked))
    }

    /// 2-D convolution with zero padding. Input is `[C×H×W]` or `[B×C×H×W]`,
    /// kernel is `[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, c_in, h, w) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {sx:?}"))),
        };
        if sk.len() != 4 || sk[1] != c_in {
            return Err(Error::dim(format!("conv2d kernel {sk:?} for input {sx:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be at least 1"));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!("conv2d kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad)));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeometry { c_in, h, w, kh, kw, stride, pad, out_h, out_w };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![0.0; rows * cols];
        let mut out = vec![0.0; batch * c_out * cols];
        let xin = self.value(x).data();
        let k = self.value(kernel).data();
        for b in 0..batch {
            kernels::im2col(&xin[b * c_in * h * w..(b + 1) * c_in * h * w], &geom, &mut col);
            kernels::gemm_nn(k, &col, &mut out[b * c_out * cols..(b + 1) * c_out * cols], c_out, rows, cols);
        }
        let shape = if sx.len() == 3 { vec![c_out, out_h, out_w] } else { vec![batch, c_out, out_h, out_w] };
        let tracked = self.any_tracked(&[x, kernel]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, kernel, geom, batch }, tracked))
    }

    /// Batch normalisation over axis 1 of a `[B×F]` or `[B×C×H×W]` tensor.
    ///
    /// In train mode the returned statistics should be folded into the running
    /// statistics by the caller; the tape itself keeps no mutable state.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::dim(format!("batch norm needs rank 2 or 4, got {sx:?}")));
        }
        let (b, f) = (sx[0], sx[1]);
        let plane: usize = sx[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != f {
                return Err(Error::dim(format!("batch norm {name} {:?} for {f} features", self.shape(v))));
            }
        }
        let train = matches!(mode, BnMode::Train);
        if train && b < 2 {
            return Err(Error::BatchSize(b));
        }
        let count = (b * plane) as f64;
        let src = self.value(x).data();
        let idx = |bi: usize, fi: usize, p: usize| (bi * f + fi) * plane + p;
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for fi in 0..f {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for p in 0..plane {
                            s += src[idx(bi, fi, p)];
                        }
                    }
                    mean[fi] = s / count;
                    let mut q = 0.0;
                    for bi in 0..b {
                        for p in 0..plane {
                            let d = src[idx(bi, fi, p)] - mean[fi];
                            q += d * d;
                        }
                    }
                    var[fi] = q / count;
                }
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::dim("running statistics do not match feature count"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for fi in 0..f {
                for p in 0..plane {
                    let i = idx(bi, fi, p);
                    xhat[i] = (src[i] - mean[fi]) * inv_std[fi];
                    out[i] = g[fi] * xhat[i] + be[fi];
                }
            }
        }
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let v = self.push(Tensor::new(&sx, out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, tracked);
        Ok((v, stats))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let off_axis_equal = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !off_axis_equal {
                return Err(Error::dim(format!("concat along axis {axis}: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.any_tracked(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), outer, inner }, tracked))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, src_len, inner) = axis_split(&shape, axis)?;
        if len == 0 || start + len > src_len {
            return Err(Error::dim(format!("narrow [{start}, {}) of axis length {src_len}", start + len)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * src_len + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow { x, outer, inner, src_len, start, len }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Selects rows (first-axis slices) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim(format!("gather indices {idx:?} for {rows} rows")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::GatherRows { x, idx: idx.to_vec() }, tracked))
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if idx.len() != shape[0] || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim(format!("scatter of {} rows to indices {idx:?} in {rows}", shape[0])));
        }
        let width: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![0.0; rows * width];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..width {
                out[i * width + j] += d[k * width + j];
            }
        }
        let mut new_shape = shape;
        new_shape[0] = rows;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::ScatterRows { x, idx: idx.to_vec() }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + k) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::SumAxis { x, outer, len, inner }, tracked))
    }

    /// `Σ_i w_i · −log softmax(logits_i)[t_i]` over the rows of `[n×c]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(Error::dim(format!("cross entropy logits {s:?} with {} targets / {} weights", targets.len(), weights.len())));
        }
        let c = s[1];
        if targets.iter().any(|&t| t >= c) {
            return Err(Error::dim("cross entropy target out of range"));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for i in 0..s[0] {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            tracked,
        ))
    }

    /// `Σ_i w_i · BCE(σ(z_i), y_i)` computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() || weights.len() != z.len() {
            return Err(Error::dim("bce targets/weights do not match logits"));
        }
        let loss = z.iter().zip(targets).zip(weights).map(|((&z, &y), &w)| w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())).sum();
        let tracked = self.tracked(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() }, tracked))
    }

    /// Elementwise Huber with unit transition point.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.map(x, Op::SmoothL1(x), |v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        if loss.0 >= nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", nodes[loss.0].value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    let bv = nodes[b.0].value.data();
                    accumulate(&mut grads, &nodes, *a, |ga| kernels::gemm_nt(&g, bv, ga, m, n, k));
                    let av = nodes[a.0].value.data();
                    accumulate(&mut grads, &nodes, *b, |gb| kernels::gemm_tn(av, &g, gb, k, m, n));
                }
                Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for a in 0..r {
                            for b in 0..c {
                                gx[a * c + b] += g[b * r + a];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads, &nodes, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &nodes, *a, |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    accumulate(&mut grads, &nodes, *b, |gb| gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&mut grads, &nodes, *a, |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                    accumulate(&mut grads, &nodes, *b, |gb| {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b));
                }
                Op::AddRowBias(x, b) => {
                    let n = nodes[x.0].value.shape()[1];
                    accumulate(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                    accumulate(&mut grads, &nodes, *b, |gb| {
                        for (j, v) in g.iter().enumerate() {
                            gb[j % n] += v;
                        }
                    });
                }
                Op::AddChannelBias(x, b) => {
                    let s = nodes[x.0].value.shape();
                    let c_axis = if s.len() == 3 { 0 } else { 1 };
                    let c = s[c_axis];
                    let plane: usize = s[c_axis + 1..].iter().product();
                    accumulate(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                    accumulate(&mut grads, &nodes, *b, |gb| {
                        for (j, v) in g.iter().enumerate() {
                            gb[(j / plane) % c] += v;
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for j in 0..g.len() {
                            if xv[j] > 0.0 {
                                gx[j] += g[j];
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for j in 0..g.len() {
                            gx[j] += g[j] * out[j] * (1.0 - out[j]);
                        }
                    });
                }
                Op::Exp(x) => {
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for j in 0..g.len() {
                            gx[j] += g[j] * out[j];
                        }
                    });
                }
                Op::Softmax { x, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let dotp: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                                for k in 0..len {
                                    gx[at(k)] += out[at(k)] * (g[at(k)] - dotp);
                                }
                            }
                        }
                    });
                }
                Op::GatedSoftmax { logits, gate, exp_shifted, denom } => {
                    let shape = nodes[logits.0].value.shape();
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut centred = vec![0.0; g.len()];
                    for n in 0..cols {
                        if denom[n] <= 0.0 {
                            continue;
                        }
                        let t: f64 = (0..rows).map(|m| out[m * cols + n] * g[m * cols + n]).sum();
                        for m in 0..rows {
                            centred[m * cols + n] = g[m * cols + n] - t;
                        }
                    }
                    accumulate(&mut grads, &nodes, *logits, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += out[j] * centred[j];
                        }
                    });
                    accumulate(&mut grads, &nodes, *gate, |gg| {
                        for m in 0..rows {
                            for n in 0..cols {
                                if denom[n] > 0.0 {
                                    let j = m * cols + n;
                                    gg[j] += exp_shifted[j] / denom[n] * centred[j];
                                }
                            }
                        }
                    });
                }
                Op::RelationAggregate { weights, values } => {
                    let sw = nodes[weights.0].value.shape();
                    let (src, tgt) = (sw[0], sw[1]);
                    let d = nodes[values.0].value.shape()[1];
                    let w = nodes[weights.0].value.data();
                    let v = nodes[values.0].value.data();
                    accumulate(&mut grads, &nodes, *weights, |gw| {
                        for m in 0..src {
                            for n in 0..tgt {
                                gw[m * tgt + n] += kernels::dot(&g[n * d..(n + 1) * d], &v[m * d..(m + 1) * d]);
                            }
                        }
                    });
                    accumulate(&mut grads, &nodes, *values, |gv| kernels::gemm_nn(w, &g, gv, src, tgt, d));
                }
                Op::Conv2d { x, kernel, geom, batch } => {
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let c_out = nodes[kernel.0].value.shape()[0];
                    let xin = nodes[x.0].value.data();
                    let kv = nodes[kernel.0].value.data();
                    let in_len = geom.c_in * geom.h * geom.w;
                    let mut col = vec![0.0; rows * cols];
                    if nodes[kernel.0].tracked {
                        let mut gk = vec![0.0; kv.len()];
                        for b in 0..*batch {
                            kernels::im2col(&xin[b * in_len..(b + 1) * in_len], geom, &mut col);
                            kernels::gemm_nt(&g[b * c_out * cols..(b + 1) * c_out * cols], &col, &mut gk, c_out, cols, rows);
                        }
                        accumulate(&mut grads, &nodes, *kernel, |acc| acc.iter_mut().zip(&gk).for_each(|(a, b)| *a += b));
                    }
                    if nodes[x.0].tracked {
                        let mut gx = vec![0.0; xin.len()];
                        for b in 0..*batch {
                            col.fill(0.0);
                            kernels::gemm_tn(kv, &g[b * c_out * cols..(b + 1) * c_out * cols], &mut col, rows, c_out, cols);
                            kernels::col2im(&col, geom, &mut gx[b * in_len..(b + 1) * in_len]);
                        }
                        accumulate(&mut grads, &nodes, *x, |acc| acc.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let s = nodes[x.0].value.shape();
                    let (b, f) = (s[0], s[1]);
                    let plane: usize = s[2..].iter().product();
                    let count = (b * plane) as f64;
                    let idx = |bi: usize, fi: usize, p: usize| (bi * f + fi) * plane + p;
                    let mut sum_dy = vec![0.0; f];
                    let mut sum_dy_xhat = vec![0.0; f];
                    for bi in 0..b {
                        for fi in 0..f {
                            for p in 0..plane {
                                let i = idx(bi, fi, p);
                                sum_dy[fi] += g[i];
                                sum_dy_xhat[fi] += g[i] * xhat[i];
                            }
                        }
                    }
                    let gv = nodes[gamma.0].value.data();
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for bi in 0..b {
                            for fi in 0..f {
                                let scale = gv[fi] * inv_std[fi];
                                for p in 0..plane {
                                    let i = idx(bi, fi, p);
                                    gx[i] += if *train {
                                        scale / count * (count * g[i] - sum_dy[fi] - xhat[i] * sum_dy_xhat[fi])
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                    });
                    accumulate(&mut grads, &nodes, *gamma, |gg| gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b));
                    accumulate(&mut grads, &nodes, *beta, |gb| gb.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b));
                }
                Op::Concat { parts, outer, inner } => {
                    let mut offset = 0;
                    let total: usize = g.len() / (outer * inner);
                    for &p in parts {
                        let len = nodes[p.0].value.numel() / (outer * inner);
                        accumulate(&mut grads, &nodes, p, |gp| {
                            for o in 0..*outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Narrow { x, outer, inner, src_len, start, len } => {
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for o in 0..*outer {
                            let base = (o * src_len + start) * inner;
                            gx[base..base + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads, &nodes, *x, |gx| gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
                }
                Op::GatherRows { x, idx } => {
                    let width = g.len() / idx.len();
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for (k, &r) in idx.iter().enumerate() {
                            for j in 0..width {
                                gx[r * width + j] += g[k * width + j];
                            }
                        }
                    });
                }
                Op::ScatterRows { x, idx } => {
                    let width = nodes[x.0].value.numel() / idx.len();
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for (k, &r) in idx.iter().enumerate() {
                            for j in 0..width {
                                gx[k * width + j] += g[r * width + j];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let s = g[0];
                    accumulate(&mut grads, &nodes, *x, |gx| gx.iter_mut().for_each(|a| *a += s));
                }
                Op::SumAxis { x, outer, len, inner } => {
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for o in 0..*outer {
                            for k in 0..*len {
                                for i in 0..*inner {
                                    gx[(o * len + k) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let c = nodes[logits.0].value.shape()[1];
                    let s = g[0];
                    accumulate(&mut grads, &nodes, *logits, |gl| {
                        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[i * c + j] += s * w * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let z = nodes[logits.0].value.data();
                    let s = g[0];
                    accumulate(&mut grads, &nodes, *logits, |gl| {
                        for j in 0..z.len() {
                            gl[j] += s * weights[j] * (sigmoid(z[j]) - targets[j]);
                        }
                    });
                }
                Op::SmoothL1(x) => {
                    let xv = nodes[x.0].value.data();
                    accumulate(&mut grads, &nodes, *x, |gx| {
                        for j in 0..g.len() {
                            gx[j] += g[j] * xv[j].clamp(-1.0, 1.0);
                        }
                    });
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) if n.tracked => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}
