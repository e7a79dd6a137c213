//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order; [`Tape::backward`] walks it in exact reverse and
//! consumes the tape. Parameter leaves reference the [`ParameterStore`]
//! instead of copying it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand::RngCore;

use super::params::{ParamId, ParameterStore};
use super::{as_matrix, kernels, numel, Tensor};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskId(usize);

/// A contiguous run of a flat logits vector treated as one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Data {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Gather { src: Var, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, segments: Vec<Segment>, targets: Vec<usize>, probs: Vec<f64> },
    LogSoftmax { logits: Var, segments: Vec<Segment> },
    Exp(Var),
    MaskedFill { src: Var, mask: MaskId },
    Dropout { src: Var, scale: Vec<f64> },
    Reshape(Var),
    Attention { qkv: Var, n_heads: usize, segments: Vec<Segment>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Data,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node>,
    masks: Vec<Vec<bool>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Vec<f64>)>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(k, _)| *k == v).map(|(_, g)| g.as_slice())
    }

    /// Summed gradient of a parameter over all its appearances on the tape.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for (p, g) in &self.params {
            if *p == id {
                match &mut out {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

fn check_finite(op: &'static str, values: &[f64], allow_neg_inf: bool) -> Result<()> {
    let bad = values
        .iter()
        .any(|v| v.is_nan() || (v.is_infinite() && !(allow_neg_inf && *v < 0.0)));
    if bad {
        Err(Error::NonFinite { op })
    } else {
        Ok(())
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

#[inline]
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = math::tanh(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl<'s> Tape<'s> {
    /// A tape with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), masks: Vec::new() }
    }

    pub fn with_store(store: &'s ParameterStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), masks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].data {
            Data::Owned(x) => x,
            Data::Param(p) => &self.store.expect("param node without store").get(*p).values,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            values: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, data: Data::Owned(values), requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf tensor; its `requires_grad` flag decides whether the
    /// backward pass reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t.values, false)?;
        Ok(self.push(t.shape, t.values, t.requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        self.leaf(Tensor::new(shape, values)?)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::UnknownParameter(format!("#{} (tape has no store)", id.index())))?;
        let t = store.try_get(id)?;
        let shape = t.shape.clone();
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { shape, data: Data::Param(id), requires_grad, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a boolean mask (`true` = blocked) for [`Tape::masked_fill`].
    pub fn add_mask(&mut self, mask: Vec<bool>) -> MaskId {
        self.masks.push(mask);
        MaskId(self.masks.len() - 1)
    }

    fn broadcast_mode(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb = numel(sb);
        if nb == 1 {
            return Ok(Broadcast::Scalar);
        }
        let (_, cols) = as_matrix(sa);
        let is_row = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
        if is_row && nb == cols {
            return Ok(Broadcast::Row);
        }
        Err(shape_err(op, format!("cannot broadcast {:?} onto {:?}", sb, sa)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        check_finite("matmul", &out, false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank {} input", s.len())));
        }
        let out = kernels::transpose(self.value(a), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(vec![s[1], s[0]], out, rg, Op::Transpose(a)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Broadcast)> {
        let mode = self.broadcast_mode(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = match mode {
            Broadcast::Same => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Scalar => va.iter().map(|x| f(*x, vb[0])).collect(),
            Broadcast::Row => {
                let n = vb.len();
                va.iter().enumerate().map(|(i, x)| f(*x, vb[i % n])).collect()
            }
        };
        check_finite(op, &out, false)?;
        Ok((out, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Add(a, b, mode)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Mul(a, b, mode)))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        check_finite("scale", &out, false)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Scale(a, c)))
    }

    /// Softmax over the last axis. `-inf` inputs get exactly zero mass.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = as_matrix(&shape);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::NonFinite { op: "softmax" });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = if xi == f64::NEG_INFINITY { 0.0 } else { math::exp(xi - max) };
                sum += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= sum;
            }
        }
        check_finite("softmax", &out, false)?;
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Softmax(a)))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = as_matrix(&shape);
        if numel(self.shape(gamma)) != cols || numel(self.shape(beta)) != cols {
            return Err(shape_err("layer_norm", format!("affine params must have {} entries", cols)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        check_finite("layer_norm", &out, false)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// GELU, tanh approximation (GPT-2 form).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        check_finite("gelu", &out, false)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Gelu(a)))
    }

    /// Gather rows of a 2-D table: output row `r` is `table[indices[r]]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("embedding_lookup", format!("table rank {}", shape.len())));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(shape_err("embedding_lookup", format!("index {} >= {} rows", i, rows)));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![indices.len(), cols], out, rg, Op::Gather { src: table, indices: indices.to_vec() }))
    }

    /// Concatenate 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat parts"));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| self.shape(*p).to_vec()).collect();
        if shapes.iter().any(|s| s.len() != 2) || axis > 1 {
            return Err(shape_err("concat", format!("needs rank-2 inputs and axis<2, got {:?}", shapes)));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return Err(shape_err("concat", format!("mismatched shapes {:?}", shapes)));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let out = if axis == 0 {
            let mut out = Vec::with_capacity(total * shapes[0][1]);
            for p in parts {
                out.extend_from_slice(self.value(*p));
            }
            out
        } else {
            let rows = shapes[0][0];
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, s) in parts.iter().zip(&shapes) {
                    out.extend_from_slice(&self.value(*p)[r * s[1]..(r + 1) * s[1]]);
                }
            }
            out
        };
        let shape = if axis == 0 { vec![total, shapes[0][1]] } else { vec![shapes[0][0], total] };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(shape, out, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Slice `len` entries starting at `start` along axis 0 or 1 of a 2-D tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || axis > 1 || start + len > s[axis] {
            return Err(shape_err("slice", format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, s)));
        }
        let v = self.value(a);
        let (out, shape) = if axis == 0 {
            (v[start * s[1]..(start + len) * s[1]].to_vec(), vec![len, s[1]])
        } else {
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&v[r * s[1] + start..r * s[1] + start + len]);
            }
            (out, vec![s[0], len])
        };
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Slice { src: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        check_finite("sum", &[s], false)?;
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![s], rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        check_finite("mean", &[s], false)?;
        let rg = self.rg(a);
        Ok(self.push(Vec::new(), vec![s], rg, Op::Mean(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| math::exp(x)).collect();
        check_finite("exp", &out, false)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Exp(a)))
    }

    /// Replace blocked positions (`mask[i] == true`) with `fill`. A fill of
    /// `-inf` is allowed; it is the only way a non-finite value enters the tape.
    pub fn masked_fill(&mut self, a: Var, mask: MaskId, fill: f64) -> Result<Var> {
        let m = &self.masks[mask.0];
        let v = self.value(a);
        if m.len() != v.len() {
            return Err(shape_err("masked_fill", format!("mask of {} for {} values", m.len(), v.len())));
        }
        if fill.is_nan() || fill == f64::INFINITY {
            return Err(Error::NonFinite { op: "masked_fill" });
        }
        let out: Vec<f64> = v.iter().zip(m).map(|(x, b)| if *b { fill } else { *x }).collect();
        check_finite("masked_fill", &out, true)?;
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::MaskedFill { src: a, mask }))
    }

    /// Multi-head causal self-attention from a fused `[n, 3 d]` projection
    /// laid out `q | k | v`, each split into `n_heads` column blocks. Each
    /// segment is an independent sequence: row `i` attends to rows `j <= i`
    /// of its own segment only, so no row ever reads a later one. Returns the
    /// concatenated head outputs, `[n, d]`.
    pub fn causal_attention(&mut self, qkv: Var, n_heads: usize, segments: &[Segment]) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || n_heads == 0 || s[1] % (3 * n_heads) != 0 {
            return Err(shape_err("causal_attention", format!("{:?} with {} heads", s, n_heads)));
        }
        let (n, d) = (s[0], s[1] / 3);
        let mut covered = 0;
        for seg in segments {
            if seg.start != covered || seg.len == 0 {
                return Err(shape_err("causal_attention", "segments must tile the rows".into()));
            }
            covered += seg.len;
        }
        if covered != n {
            return Err(shape_err("causal_attention", format!("segments cover {} of {} rows", covered, n)));
        }
        let dh = d / n_heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let x = self.value(qkv);
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(n_heads * segments.iter().map(|g| g.len * (g.len + 1) / 2).sum::<usize>());
        let mut row = Vec::new();
        for seg in segments {
            for h in 0..n_heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..seg.len {
                    let qi = &x[(seg.start + i) * 3 * d + qo..][..dh];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &x[(seg.start + j) * 3 * d + ko..][..dh];
                        let v = kernels::dot(qi, kj) * scale;
                        max = max.max(v);
                        row.push(v);
                    }
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = math::exp(*v - max);
                        sum += *v;
                    }
                    let o = &mut out[(seg.start + i) * d + qo..][..dh];
                    for (j, p) in row.iter_mut().enumerate() {
                        *p /= sum;
                        let vj = &x[(seg.start + j) * 3 * d + vo..][..dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += *p * b);
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        check_finite("causal_attention", &out, false)?;
        let rg = self.rg(qkv);
        Ok(self.push(vec![n, d], out, rg, Op::Attention { qkv, n_heads, segments: segments.to_vec(), probs }))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `a`.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = numel(self.shape(a));
        let scale: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let out: Vec<f64> = self.value(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, rg, Op::Dropout { src: a, scale }))
    }

    fn check_segments(&self, op: &'static str, logits: Var, segments: &[Segment]) -> Result<()> {
        let n = numel(self.shape(logits));
        for s in segments {
            if s.len == 0 || s.start + s.len > n {
                return Err(shape_err(op, format!("segment {:?} outside {} logits", s, n)));
            }
        }
        Ok(())
    }

    /// Summed cross-entropy `-log softmax(logits[seg])[target]` over segments
    /// of a flat logits tensor.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, segments: &[Segment], targets: &[usize]) -> Result<Var> {
        self.check_segments("cross_entropy", logits, segments)?;
        if segments.len() != targets.len() {
            return Err(shape_err("cross_entropy", format!("{} segments, {} targets", segments.len(), targets.len())));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (s, &t) in segments.iter().zip(targets) {
            if t >= s.len {
                return Err(shape_err("cross_entropy", format!("target {} in segment of {}", t, s.len)));
            }
            let row = &x[s.start..s.start + s.len];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| math::exp(v - max)).sum();
            let lse = max + math::ln(sum);
            for (j, v) in row.iter().enumerate() {
                probs[s.start + j] = math::exp(v - lse);
            }
            loss += lse - row[t];
        }
        check_finite("cross_entropy", &[loss], false)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy { logits, segments: segments.to_vec(), targets: targets.to_vec(), probs },
        ))
    }

    /// Log-softmax within each segment; entries outside every segment pass
    /// through as zero.
    pub fn log_softmax_segments(&mut self, logits: Var, segments: &[Segment]) -> Result<Var> {
        self.check_segments("log_softmax", logits, segments)?;
        let x = self.value(logits);
        let mut out = vec![0.0; x.len()];
        for s in segments {
            let row = &x[s.start..s.start + s.len];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| math::exp(v - max)).sum();
            let lse = max + math::ln(sum);
            for (j, v) in row.iter().enumerate() {
                out[s.start + j] = v - lse;
            }
        }
        check_finite("log_softmax", &out, false)?;
        let rg = self.rg(logits);
        let shape = self.shape(logits).to_vec();
        Ok(self.push(shape, out, rg, Op::LogSoftmax { logits, segments: segments.to_vec() }))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let n_loss = numel(self.shape(loss));
        if n_loss != 1 {
            return Err(Error::NonScalarLoss { numel: n_loss });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&node.op, grads[i].take()) {
                match node.data {
                    Data::Param(p) => out.params.push((p, g)),
                    Data::Owned(_) => out.leaves.push((Var(i), g)),
                }
            }
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = numel(self.shape(v));
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = match &node.data {
            Data::Owned(v) => v.as_slice(),
            Data::Param(_) => unreachable!("param nodes are leaves"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = self.grad_slot(grads, *a) {
                    kernels::matmul_grad_lhs(g, self.value(*b), da, m, k, n);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    kernels::matmul_grad_rhs(self.value(*a), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                if let Some(da) = self.grad_slot(grads, *a) {
                    // g is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b, mode) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    reduce_into(db, g, *mode);
                }
            }
            Op::Mul(a, b, mode) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_slot(grads, *a) {
                    match mode {
                        Broadcast::Same => da.iter_mut().zip(g.iter().zip(vb)).for_each(|(d, (x, y))| *d += x * y),
                        Broadcast::Scalar => da.iter_mut().zip(g).for_each(|(d, x)| *d += x * vb[0]),
                        Broadcast::Row => {
                            let n = vb.len();
                            da.iter_mut().zip(g).enumerate().for_each(|(j, (d, x))| *d += x * vb[j % n])
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    let prod: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    reduce_into(db, &prod, *mode);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::Softmax(a) => {
                let (rows, cols) = as_matrix(&node.shape);
                if let Some(da) = self.grad_slot(grads, *a) {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotp = kernels::dot(gr, y);
                        for j in 0..cols {
                            da[r * cols + j] += y[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = as_matrix(&node.shape);
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                }
                let gam = self.value(*gamma).to_vec();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in 0..cols {
                            let d = gr[j] * gam[j];
                            dx[r * cols + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().zip(g.iter().zip(va)).for_each(|(d, (x, v))| *d += x * gelu_parts(*v).1);
                }
            }
            Op::Gather { src, indices } => {
                let cols = node.shape[1];
                if let Some(ds) = self.grad_slot(grads, *src) {
                    for (r, &idx) in indices.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        ds[idx * cols..(idx + 1) * cols].iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p).to_vec();
                    if let Some(dp) = self.grad_slot(grads, *p) {
                        if *axis == 0 {
                            let n = s[0] * s[1];
                            dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, x)| *d += x);
                        } else {
                            for r in 0..s[0] {
                                let src = &g[r * total_cols + offset..r * total_cols + offset + s[1]];
                                dp[r * s[1]..(r + 1) * s[1]].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                            }
                        }
                    }
                    offset += if *axis == 0 { s[0] * s[1] } else { s[1] };
                }
            }
            Op::Slice { src, axis, start } => {
                let s = self.shape(*src).to_vec();
                let len = node.shape[*axis];
                if let Some(ds) = self.grad_slot(grads, *src) {
                    if *axis == 0 {
                        let off = start * s[1];
                        ds[off..off + len * s[1]].iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    } else {
                        for r in 0..s[0] {
                            let dst = &mut ds[r * s[1] + start..r * s[1] + start + len];
                            dst.iter_mut().zip(&g[r * len..(r + 1) * len]).for_each(|(d, x)| *d += x);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = numel(self.shape(*a)) as f64;
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da.iter_mut().zip(g.iter().zip(out)).for_each(|(d, (x, y))| *d += x * y);
                }
            }
            Op::MaskedFill { src, mask } => {
                let m = &self.masks[mask.0];
                if let Some(ds) = self.grad_slot(grads, *src) {
                    for ((d, x), b) in ds.iter_mut().zip(g).zip(m) {
                        if !*b {
                            *d += x;
                        }
                    }
                }
            }
            Op::Dropout { src, scale } => {
                if let Some(ds) = self.grad_slot(grads, *src) {
                    ds.iter_mut().zip(g.iter().zip(scale)).for_each(|(d, (x, s))| *d += x * s);
                }
            }
            Op::CrossEntropy { logits, segments, targets, probs } => {
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    for (s, &t) in segments.iter().zip(targets) {
                        for j in 0..s.len {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[s.start + j] += g[0] * (probs[s.start + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention { qkv, n_heads, segments, probs } => {
                let d = node.shape[1];
                let dh = d / n_heads;
                let scale = 1.0 / math::sqrt(dh as f64);
                let x = self.value(*qkv);
                if let Some(dx) = self.grad_slot(grads, *qkv) {
                    let mut pi = 0;
                    let mut ds = Vec::new();
                    for seg in segments {
                        for h in 0..*n_heads {
                            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                            for i in 0..seg.len {
                                let p = &probs[pi..pi + i + 1];
                                pi += i + 1;
                                let gi = &g[(seg.start + i) * d + qo..][..dh];
                                ds.clear();
                                let mut acc = 0.0;
                                for (j, pj) in p.iter().enumerate() {
                                    let vj = &x[(seg.start + j) * 3 * d + vo..][..dh];
                                    let dp = kernels::dot(gi, vj);
                                    acc += pj * dp;
                                    ds.push(dp);
                                }
                                for (j, pj) in p.iter().enumerate() {
                                    let dsj = pj * (ds[j] - acc) * scale;
                                    let (rj, ri) = ((seg.start + j) * 3 * d, (seg.start + i) * 3 * d);
                                    for c in 0..dh {
                                        dx[ri + qo + c] += dsj * x[rj + ko + c];
                                        dx[rj + ko + c] += dsj * x[ri + qo + c];
                                        dx[rj + vo + c] += pj * gi[c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { logits, segments } => {
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    for s in segments {
                        let gs = &g[s.start..s.start + s.len];
                        let total: f64 = gs.iter().sum();
                        for j in 0..s.len {
                            let p = math::exp(out[s.start + j]);
                            dl[s.start + j] += gs[j] - p * total;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulate `g` (shaped like the broadcast output) into the gradient of a
/// broadcast right-hand operand.
fn reduce_into(db: &mut [f64], g: &[f64], mode: Broadcast) {
    match mode {
        Broadcast::Same => db.iter_mut().zip(g).for_each(|(d, x)| *d += x),
        Broadcast::Scalar => db[0] += g.iter().sum::<f64>(),
        Broadcast::Row => {
            let n = db.len();
            for (j, x) in g.iter().enumerate() {
                db[j % n] += x;
            }
        }
    }
}
