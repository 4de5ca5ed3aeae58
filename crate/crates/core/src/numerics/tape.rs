//! Reverse-mode differentiation over an append-only record of primitive
//! applications.
//!
//! Every primitive computes its forward value eagerly and stores what its
//! backward rule needs. `backward` walks the record once in reverse order.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOp {
    Avg,
    Max,
}

/// Pairwise similarity between embedding vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Dot,
    Cos,
    Dist,
}

pub(crate) const COS_EPS: f64 = 1e-12;
pub(crate) const L2_FLOOR: f64 = 1e-12;

/// Positive and negative membership for an `anchors x candidates` similarity
/// matrix. Shared by every group of a batched similarity tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMask {
    anchors: usize,
    candidates: usize,
    pos: Vec<bool>,
    neg: Vec<bool>,
}

impl PairMask {
    pub fn new(anchors: usize, candidates: usize) -> Self {
        let n = anchors * candidates;
        Self { anchors, candidates, pos: vec![false; n], neg: vec![false; n] }
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    pub fn set_pos(&mut self, a: usize, c: usize) {
        let i = a * self.candidates + c;
        self.pos[i] = true;
        self.neg[i] = false;
    }

    pub fn set_neg(&mut self, a: usize, c: usize) {
        let i = a * self.candidates + c;
        if !self.pos[i] {
            self.neg[i] = true;
        }
    }

    pub fn is_pos(&self, a: usize, c: usize) -> bool {
        self.pos[a * self.candidates + c]
    }

    pub fn is_neg(&self, a: usize, c: usize) -> bool {
        self.neg[a * self.candidates + c]
    }

    pub fn positives(&self, a: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        let row = &self.pos[a * self.candidates..(a + 1) * self.candidates];
        row.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c)
    }

    pub fn negatives(&self, a: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        let row = &self.neg[a * self.candidates..(a + 1) * self.candidates];
        row.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c)
    }

    fn has_pos(&self, a: usize) -> bool {
        self.positives(a).next().is_some()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv1d { input: Var, weight: Var, bias: Var, dilation: usize },
    Pool { input: Var, kernel: usize, op: PoolOp, argmax: Vec<usize> },
    LayerNorm { input: Var, gain: Var, offset: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { input: Var, norms: Vec<f64> },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Permute { input: Var, perm: Vec<usize> },
    Reshape(Var),
    PairwiseSim { a: Var, b: Var, kind: SimKind },
    MaskedInfoNce { sims: Var, mask: PairMask, temperature: f64 },
    MaskedTriplet { sims: Var, mask: PairMask, temperature: f64, margin: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Append-only computation record. Inputs of a node always precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for any other node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..m {
            let x = a[i * m + k];
            if x == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, w) in row.iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, trainable: false, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: false, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, trainable: true, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())?;
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// `(n x m) @ (m x p)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (n, m, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * p];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, m, p);
        self.push(Tensor::new(vec![n, p], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Dilated 1-d convolution with symmetric zero padding; output length
    /// equals input length.
    pub fn conv1d_dilated(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Parameter("dilation must be >= 1".into()));
        }
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 3 || sb.len() != 1 || si[2] != sw[1] || sw[2] != sb[0] {
            return Err(Error::Dimension(format!("conv1d input {si:?} weight {sw:?} bias {sb:?}")));
        }
        let (b, t, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sw[0], sw[2]);
        let half = k / 2;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0; b * t * cout];
        for bi in 0..b {
            for ti in 0..t {
                let row = &mut out[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                row.copy_from_slice(bias_v);
                for ki in 0..k {
                    let s = ti as isize + (ki as isize - half as isize) * dilation as isize;
                    if s < 0 || s >= t as isize {
                        continue;
                    }
                    let xrow = &x[(bi * t + s as usize) * cin..(bi * t + s as usize + 1) * cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w[(ki * cin + ci) * cout..(ki * cin + ci + 1) * cout];
                        for (o, wv) in row.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, t, cout], out)?;
        self.push(value, Op::Conv1d { input, weight, bias, dilation }, &[input, weight, bias])
    }

    /// Non-overlapping pooling along time (stride = kernel, partial last window).
    pub fn pool1d(&mut self, input: Var, kernel: usize, op: PoolOp) -> Result<Var> {
        if kernel < 2 {
            return Err(Error::Parameter(format!("pool kernel must be >= 2, got {kernel}")));
        }
        let s = self.shape(input);
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Dimension(format!("pool1d expects B x T x d with T >= 1, got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let to = t.div_ceil(kernel);
        let x = self.value(input).data();
        let mut out = vec![0.0; b * to * d];
        let mut argmax = Vec::new();
        if op == PoolOp::Max {
            argmax = vec![0usize; b * to * d];
        }
        for bi in 0..b {
            for w in 0..to {
                let lo = w * kernel;
                let hi = ((w + 1) * kernel).min(t);
                for c in 0..d {
                    let o = (bi * to + w) * d + c;
                    match op {
                        PoolOp::Avg => {
                            let sum: f64 = (lo..hi).map(|ti| x[(bi * t + ti) * d + c]).sum();
                            out[o] = sum / (hi - lo) as f64;
                        }
                        PoolOp::Max => {
                            let mut best = (bi * t + lo) * d + c;
                            for ti in lo + 1..hi {
                                let i = (bi * t + ti) * d + c;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                            out[o] = x[best];
                            argmax[o] = best;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, to, d], out)?;
        self.push(value, Op::Pool { input, kernel, op, argmax }, &[input])
    }

    /// Normalize each trailing-axis vector to zero mean and unit variance,
    /// then apply `gain` and `offset`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm input {s:?} gain {:?} offset {:?}",
                self.shape(gain),
                self.shape(offset)
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let v = &x[r * d..(r + 1) * d];
            let mean = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (v[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + o[c];
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(value, Op::LayerNorm { input, gain, offset, xhat, inv_std }, &[input, gain, offset])
    }

    /// `v / max(|v|_2, 1e-12)` over the trailing axis.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or_else(|| Error::Dimension("l2_normalize on scalar".into()))?;
        let x = self.value(input).data();
        let rows = x.len().checked_div(d).unwrap_or(0);
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let v = &x[r * d..(r + 1) * d];
            let n = norm(v);
            norms[r] = n;
            let denom = n.max(L2_FLOOR);
            for c in 0..d {
                out[r * d + c] = v[c] / denom;
            }
        }
        let value = Tensor::new(s, out)?;
        self.push(value, Op::L2Normalize { input, norms }, &[input])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or_else(|| Error::Dimension("softmax on scalar".into()))?;
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for (row, orow) in x.chunks(d.max(1)).zip(out.chunks_mut(d.max(1))) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(Tensor::new(s, out)?, Op::Softmax(input), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let v = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(input), &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(axis, start, len)?;
        self.push(value, Op::Slice { input, axis, start }, &[input])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("bad permutation {perm:?} for {s:?}")));
        }
        let value = permute_tensor(self.value(input), perm);
        self.push(value, Op::Permute { input, perm: perm.to_vec() }, &[input])
    }

    /// Swap two axes.
    pub fn transpose(&mut self, input: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(input).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Dimension(format!("transpose axes {a},{b} of {:?}", self.shape(input))));
        }
        perm.swap(a, b);
        self.permute(input, &perm)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(input), &[input])
    }

    /// Batched pairwise similarity: `(G x N x d, G x M x d) -> G x N x M`.
    pub fn pairwise_sim(&mut self, a: Var, b: Var, kind: SimKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Dimension(format!("pairwise_sim {sa:?} vs {sb:?}")));
        }
        let (g, n, m, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * n * m];
        for gi in 0..g {
            let ynorms: Vec<f64> = match kind {
                SimKind::Cos => (0..m).map(|j| norm(&y[(gi * m + j) * d..(gi * m + j + 1) * d])).collect(),
                _ => Vec::new(),
            };
            for i in 0..n {
                let u = &x[(gi * n + i) * d..(gi * n + i + 1) * d];
                let un = if kind == SimKind::Cos { norm(u) } else { 0.0 };
                for j in 0..m {
                    let v = &y[(gi * m + j) * d..(gi * m + j + 1) * d];
                    out[(gi * n + i) * m + j] = match kind {
                        SimKind::Dot => dot(u, v),
                        SimKind::Cos => dot(u, v) / (un * ynorms[j] + COS_EPS),
                        SimKind::Dist => -u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
                    };
                }
            }
        }
        let value = Tensor::new(vec![g, n, m], out)?;
        self.push(value, Op::PairwiseSim { a, b, kind }, &[a, b])
    }

    fn check_mask(&self, sims: Var, mask: &PairMask, temperature: f64) -> Result<()> {
        let s = self.shape(sims);
        if s.len() != 3 || s[1] != mask.anchors || s[2] != mask.candidates {
            return Err(Error::Dimension(format!(
                "similarities {s:?} vs mask {}x{}",
                mask.anchors, mask.candidates
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(())
    }

    /// Multi-positive InfoNCE averaged over every (group, anchor) that has at
    /// least one positive. Returns 0 when no anchor qualifies.
    pub fn masked_infonce(&mut self, sims: Var, mask: PairMask, temperature: f64) -> Result<Var> {
        self.check_mask(sims, &mask, temperature)?;
        let s = self.value(sims);
        let (g, n, m) = (s.dim(0), s.dim(1), s.dim(2));
        let data = s.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for gi in 0..g {
            for a in 0..n {
                if !mask.has_pos(a) {
                    continue;
                }
                let row = &data[(gi * n + a) * m..(gi * n + a + 1) * m];
                let pos = mask.positives(a).map(|c| row[c] / temperature);
                let all = (0..m)
                    .filter(|&c| mask.is_pos(a, c) || mask.is_neg(a, c))
                    .map(|c| row[c] / temperature);
                total += logsumexp(all) - logsumexp(pos);
                count += 1;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(v), Op::MaskedInfoNce { sims, mask, temperature }, &[sims])
    }

    /// Hinge `max(0, margin + s(a,n)/tau - s(a,p)/tau)` averaged over every
    /// (group, anchor, positive, negative) triple. Returns 0 with no triples.
    pub fn masked_triplet(&mut self, sims: Var, mask: PairMask, temperature: f64, margin: f64) -> Result<Var> {
        self.check_mask(sims, &mask, temperature)?;
        let s = self.value(sims);
        let (g, n, m) = (s.dim(0), s.dim(1), s.dim(2));
        let data = s.data();
        let mut total = 0.0;
        let mut count = 0usize;
        for gi in 0..g {
            for a in 0..n {
                let row = &data[(gi * n + a) * m..(gi * n + a + 1) * m];
                let negs: Vec<f64> = mask.negatives(a).map(|c| row[c] / temperature).collect();
                for p in mask.positives(a) {
                    let sp = row[p] / temperature;
                    for sn in &negs {
                        total += (margin + sn - sp).max(0.0);
                    }
                    count += negs.len();
                }
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(Tensor::scalar(v), Op::MaskedTriplet { sims, mask, temperature, margin }, &[sims])
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(node, &gy, &mut grads)?;
            if node.trainable {
                grads[i] = Some(gy);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if grads[i].is_none() {
                    grads[i] = Some(node.value.zeros_like());
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(self.nodes[v.0].value.zeros_like());
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches value shape")
    }

    fn backprop(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = gy.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = g.iter().zip(z).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let d = g.iter().zip(x).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, gy.scaled(*f)),
            Op::Tanh(a) => {
                let d = g.iter().zip(y).map(|(p, t)| p * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(p, v)| if *v > 0.0 { *p } else { 0.0 }).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(p, e)| p * e).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(p, v)| p / v).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), orow) in y.chunks(d).zip(g.chunks(d)).zip(out.chunks_mut(d)) {
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in orow.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - s);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, out));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![g[0] / n as f64; n]));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, m, p) = (sa[0], sa[1], sb[1]);
                let (x, w) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    // dA = G W^T
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        for k in 0..m {
                            d[i * m + k] = dot(&g[i * p..(i + 1) * p], &w[k * p..(k + 1) * p]);
                        }
                    }
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    // dW = A^T G
                    let mut d = vec![0.0; m * p];
                    for i in 0..n {
                        for k in 0..m {
                            let xv = x[i * m + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for j in 0..p {
                                d[k * p + j] += xv * g[i * p + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Conv1d { input, weight, bias, dilation } => {
                self.conv_backward(*input, *weight, *bias, *dilation, g, grads);
            }
            Op::Pool { input, kernel, op, argmax } => {
                let s = self.shape(*input);
                let (b, t, d) = (s[0], s[1], s[2]);
                let to = t.div_ceil(*kernel);
                self.accumulate_with(grads, *input, |dx| match op {
                    PoolOp::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                    PoolOp::Avg => {
                        for bi in 0..b {
                            for w in 0..to {
                                let lo = w * kernel;
                                let hi = ((w + 1) * kernel).min(t);
                                let inv = 1.0 / (hi - lo) as f64;
                                for c in 0..d {
                                    let gv = g[(bi * to + w) * d + c] * inv;
                                    for ti in lo..hi {
                                        dx[(bi * t + ti) * d + c] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { input, gain, offset, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let gn = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    self.accumulate(grads, *gain, self.like(*gain, dg));
                }
                if self.needs(*offset) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for c in 0..d {
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *offset, self.like(*offset, db));
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let gh: Vec<f64> = gr.iter().zip(gn).map(|(p, q)| p * q).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dr[c] = inv_std[r] * (gh[c] - mean_gh - hr[c] * mean_ghh);
                        }
                    }
                    self.accumulate(grads, *input, self.like(*input, dx));
                }
            }
            Op::L2Normalize { input, norms } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for (r, ((gr, yr), dr)) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let n = norms[r];
                    if n > L2_FLOOR {
                        let s = dot(yr, gr);
                        for c in 0..d {
                            dr[c] = (gr[c] - yr[c] * s) / n;
                        }
                    } else {
                        for c in 0..d {
                            dr[c] = gr[c] / L2_FLOOR;
                        }
                    }
                }
                self.accumulate(grads, *input, self.like(*input, dx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.dim(*axis);
                let mut off = 0;
                for &v in inputs {
                    let len = self.value(v).dim(*axis);
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, self.like(v, d));
                    }
                    off += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let full = self.value(*input).dim(*axis);
                let (outer, inner) = outer_inner(self.shape(*input), *axis);
                let len = node.value.dim(*axis);
                self.accumulate_with(grads, *input, |dx| {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = (o * full + start) * inner;
                        for (a, b) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *input, permute_tensor(gy, &inverse));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, self.like(*a, g.to_vec()));
            }
            Op::PairwiseSim { a, b, kind } => self.sim_backward(*a, *b, *kind, node, g, grads),
            Op::MaskedInfoNce { sims, mask, temperature } => {
                let s = self.value(*sims);
                let (gn, n, m) = (s.dim(0), s.dim(1), s.dim(2));
                let count = gn * (0..n).filter(|&a| mask.has_pos(a)).count();
                if count == 0 {
                    return Ok(());
                }
                let scale = g[0] / count as f64 / temperature;
                let data = s.data();
                self.accumulate_with(grads, *sims, |ds| {
                    for gi in 0..gn {
                        for a in 0..n {
                            if !mask.has_pos(a) {
                                continue;
                            }
                            let base = (gi * n + a) * m;
                            let row = &data[base..base + m];
                            let lse_pos = logsumexp(mask.positives(a).map(|c| row[c] / temperature));
                            let lse_all = logsumexp(
                                (0..m)
                                    .filter(|&c| mask.is_pos(a, c) || mask.is_neg(a, c))
                                    .map(|c| row[c] / temperature),
                            );
                            for c in 0..m {
                                let z = row[c] / temperature;
                                let mut v = 0.0;
                                if mask.is_pos(a, c) || mask.is_neg(a, c) {
                                    v += (z - lse_all).exp();
                                }
                                if mask.is_pos(a, c) {
                                    v -= (z - lse_pos).exp();
                                }
                                ds[base + c] += scale * v;
                            }
                        }
                    }
                });
            }
            Op::MaskedTriplet { sims, mask, temperature, margin } => {
                let s = self.value(*sims);
                let (gn, n, m) = (s.dim(0), s.dim(1), s.dim(2));
                let per_group: usize = (0..n).map(|a| mask.positives(a).count() * mask.negatives(a).count()).sum();
                let count = gn * per_group;
                if count == 0 {
                    return Ok(());
                }
                let scale = g[0] / count as f64 / temperature;
                let data = s.data();
                self.accumulate_with(grads, *sims, |ds| {
                    for gi in 0..gn {
                        for a in 0..n {
                            let base = (gi * n + a) * m;
                            let row = &data[base..base + m];
                            let negs: Vec<usize> = mask.negatives(a).collect();
                            for p in mask.positives(a) {
                                for &q in &negs {
                                    if margin + (row[q] - row[p]) / temperature > 0.0 {
                                        ds[base + q] += scale;
                                        ds[base + p] -= scale;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn conv_backward(&self, input: Var, weight: Var, bias: Var, dilation: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let (b, t, cin) = (si[0], si[1], si[2]);
        let (k, cout) = (sw[0], sw[2]);
        let half = k / 2;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        if self.needs(bias) {
            let mut db = vec![0.0; cout];
            for row in g.chunks(cout) {
                for (o, v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
            self.accumulate(grads, bias, self.like(bias, db));
        }
        let need_w = self.needs(weight);
        let need_x = self.needs(input);
        if !need_w && !need_x {
            return;
        }
        let mut dw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
        for bi in 0..b {
            for ti in 0..t {
                let grow = &g[(bi * t + ti) * cout..(bi * t + ti + 1) * cout];
                for ki in 0..k {
                    let s = ti as isize + (ki as isize - half as isize) * dilation as isize;
                    if s < 0 || s >= t as isize {
                        continue;
                    }
                    let xo = (bi * t + s as usize) * cin;
                    for ci in 0..cin {
                        let wo = (ki * cin + ci) * cout;
                        if need_w {
                            let xv = x[xo + ci];
                            if xv != 0.0 {
                                for (dwv, gv) in dw[wo..wo + cout].iter_mut().zip(grow) {
                                    *dwv += xv * gv;
                                }
                            }
                        }
                        if need_x {
                            dx[xo + ci] += dot(&w[wo..wo + cout], grow);
                        }
                    }
                }
            }
        }
        if need_w {
            self.accumulate(grads, weight, self.like(weight, dw));
        }
        if need_x {
            self.accumulate(grads, input, self.like(input, dx));
        }
    }

    fn sim_backward(&self, a: Var, b: Var, kind: SimKind, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        let s = node.value.shape();
        let (gn, n, m) = (s[0], s[1], s[2]);
        let d = self.shape(a)[2];
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let sv = node.value.data();
        let mut da = vec![0.0; x.len()];
        let mut db = vec![0.0; y.len()];
        for gi in 0..gn {
            let xn: Vec<f64> = (0..n).map(|i| norm(&x[(gi * n + i) * d..(gi * n + i + 1) * d])).collect();
            let yn: Vec<f64> = (0..m).map(|j| norm(&y[(gi * m + j) * d..(gi * m + j + 1) * d])).collect();
            for i in 0..n {
                let ao = (gi * n + i) * d;
                for j in 0..m {
                    let gv = g[(gi * n + i) * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let bo = (gi * m + j) * d;
                    match kind {
                        SimKind::Dot => {
                            for c in 0..d {
                                da[ao + c] += gv * y[bo + c];
                                db[bo + c] += gv * x[ao + c];
                            }
                        }
                        SimKind::Cos => {
                            let den = xn[i] * yn[j] + COS_EPS;
                            let u = sv[(gi * n + i) * m + j] * den;
                            let ca = if xn[i] > 0.0 { u * yn[j] / (den * den * xn[i]) } else { 0.0 };
                            let cb = if yn[j] > 0.0 { u * xn[i] / (den * den * yn[j]) } else { 0.0 };
                            for c in 0..d {
                                da[ao + c] += gv * (y[bo + c] / den - ca * x[ao + c]);
                                db[bo + c] += gv * (x[ao + c] / den - cb * y[bo + c]);
                            }
                        }
                        SimKind::Dist => {
                            let dist = -sv[(gi * n + i) * m + j];
                            if dist > 0.0 {
                                for c in 0..d {
                                    let r = (x[ao + c] - y[bo + c]) / dist;
                                    da[ao + c] -= gv * r;
                                    db[bo + c] += gv * r;
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.needs(a) {
            self.accumulate(grads, a, self.like(a, da));
        }
        if self.needs(b) {
            self.accumulate(grads, b, self.like(b, db));
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Conv1d { .. } => "conv1d_dilated",
        Op::Pool { .. } => "pool1d",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Softmax(..) => "softmax",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Permute { .. } => "permute",
        Op::Reshape(..) => "reshape",
        Op::PairwiseSim { .. } => "pairwise_sim",
        Op::MaskedInfoNce { .. } => "masked_infonce",
        Op::MaskedTriplet { .. } => "masked_triplet",
    }
}
