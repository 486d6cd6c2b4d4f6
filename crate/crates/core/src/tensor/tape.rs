//! Dynamic reverse-mode tape.
//!
//! A tape is built fresh for every forward pass. Each operation stores its
//! output value and enough of its inputs to run the chain rule backwards.
//! Nodes whose inputs are all constants are still recorded but flagged as
//! not requiring gradients, and backward skips them.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            grad_enabled: true,
        }
    }

    /// A tape that never requires gradients; used for evaluation.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.detached(),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// Records a leaf; it is differentiable iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled && value.requires_grad();
        self.push_node(value, Op::Leaf, rg)
    }

    /// Records a store parameter. Repeated calls return the same node, so a
    /// shared weight used by several blocks accumulates all its gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push_node(store.get(id).detached(), Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    // ----- ops -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).add_scalar(c)?;
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c)?;
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    /// `x (r×c) + row (c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(row))?;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Scales row `i` of `x (r×c)` by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = self.value(x).mul_rows(self.value(s))?;
        Ok(self.push(out, Op::MulRows(x, s), &[x, s]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).relu()?;
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).gelu()?;
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).sum()?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mean()?;
        Ok(self.push(out, Op::Mean(x), &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).sum_axis(axis)?;
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(0);
        let summed = self.sum_axis(x, axis)?;
        self.scale(summed, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(indices)?;
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], out_rows: usize) -> Result<Var> {
        let out = self.value(x).scatter_rows(indices, out_rows)?;
        Ok(self.push(out, Op::ScatterRows(x, indices.to_vec()), &[x]))
    }

    /// Picks elements of `x` by flat index; the result is one-dimensional.
    pub fn gather_elems(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_elems(indices)?;
        Ok(self.push(out, Op::GatherElems(x, indices.to_vec()), &[x]))
    }

    /// Normalizes each row of `x (r×c)` with the biased variance, then applies
    /// `γ ⊙ · + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xt = self.value(x);
        let (r, c) = xt.dims2("layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: xt.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xt.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::checked("layer_norm", vec![r, c], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product attention over `q, k, v (T×d)`, where `T` is a
    /// whole number of sequences of `seq_len` tokens and the feature axis is
    /// split into `heads` contiguous slices. Tokens attend only within their
    /// own sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (t, d) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    left: vec![t, d],
                    right: self.value(other).shape().to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if seq_len == 0 || t % seq_len != 0 {
            return Err(Error::invalid(format!("attention: {t} tokens not a multiple of length {seq_len}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let seqs = t / seq_len;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; seqs * heads * seq_len * seq_len];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; seq_len];
        for s in 0..seqs {
            for h in 0..heads {
                let base = (s * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qd[(s * seq_len + i) * d + h * dh..][..dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &kd[(s * seq_len + j) * d + h * dh..][..dh];
                        *sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let p = kernels::softmax_strided(&scores, 1, seq_len, 1);
                    probs[base + i * seq_len..base + (i + 1) * seq_len].copy_from_slice(&p);
                    let oi = &mut out[(s * seq_len + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(s * seq_len + j) * d + h * dh..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::checked("attention", vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean over rows of `−Σ_c target_c · log softmax(logits)_c`, where the
    /// target puts `1 − s` on the label and `s / (C − 1)` on every other class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::invalid(format!("cross_entropy: {} labels for {n} rows", labels.len())));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if smoothing > 0.0 && c < 2 {
            return Err(Error::invalid("label smoothing needs at least two classes"));
        }
        if n == 0 {
            return Err(Error::invalid("cross_entropy of an empty batch"));
        }
        let mut targets = vec![0.0; n * c];
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::invalid(format!("label {l} out of range for {c} classes")));
            }
            let off = if c > 1 { smoothing / (c - 1) as f64 } else { 0.0 };
            targets[i * c..(i + 1) * c].iter_mut().for_each(|t| *t = off);
            targets[i * c + l] = 1.0 - smoothing;
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
                let t = targets[i * c + j];
                if t != 0.0 {
                    total -= t * (row[j] - lse);
                }
            }
        }
        let value = Tensor::checked("cross_entropy", vec![], vec![total / n as f64])?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    // ----- backward ------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    /// A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::Autograd(format!("loss must be a scalar, got shape {shape:?}")));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(c),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so `self` stays mutably borrowable; it is put
        // back afterwards so the tape remains inspectable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let bd = self.value(*b).data().to_vec();
                let ad = self.value(*a).data().to_vec();
                self.add_grad(*a, || kernels::matmul_nt(g, &bd, m, n, k));
                self.add_grad(*b, || kernels::matmul_tn(&ad, g, k, m, n));
            }
            Op::Add(a, b) => {
                self.add_grad(*a, || g.to_vec());
                self.add_grad(*b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, || g.to_vec());
                self.add_grad(*b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                self.add_grad(*a, || g.iter().zip(&bd).map(|(x, y)| x * y).collect());
                self.add_grad(*b, || g.iter().zip(&ad).map(|(x, y)| x * y).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.add_grad(*a, || g.to_vec()),
            Op::Scale(a, c) => self.add_grad(*a, || g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, row) => {
                let c = self.value(*row).numel();
                self.add_grad(*x, || g.to_vec());
                self.add_grad(*row, || {
                    let mut acc = vec![0.0; c];
                    for r in g.chunks(c) {
                        acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
            }
            Op::MulRows(x, s) => {
                let c = self.value(*x).shape()[1];
                let sd = self.value(*s).data().to_vec();
                let xd = self.value(*x).data().to_vec();
                self.add_grad(*x, || {
                    g.chunks(c.max(1))
                        .zip(&sd)
                        .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
                        .collect()
                });
                self.add_grad(*s, || {
                    g.chunks(c.max(1))
                        .zip(xd.chunks(c.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data().to_vec();
                self.add_grad(*x, || {
                    g.iter().zip(&xd).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect()
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data().to_vec();
                self.add_grad(*x, || g.iter().zip(&xd).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect());
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                self.add_grad(*x, || kernels::transpose(g, c, r));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.add_grad(*x, || vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.add_grad(*x, || vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(self.value(*x).shape(), *axis);
                self.add_grad(*x, || {
                    let mut out = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for k in 0..inner {
                                out[o * len * inner + j * inner + k] = g[o * inner + k];
                            }
                        }
                    }
                    out
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = kernels::axis_split(self.value(*x).shape(), *axis);
                let y = self.nodes[i].value.data().to_vec();
                self.add_grad(*x, || {
                    let mut out = vec![0.0; y.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                out[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    out
                });
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                self.add_grad(*x, || {
                    let mut out = vec![0.0; r * c];
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            out[row * c + j] += g[k * c + j];
                        }
                    }
                    out
                });
            }
            Op::ScatterRows(x, idx) => {
                let c = self.value(*x).shape()[1];
                self.add_grad(*x, || idx.iter().flat_map(|&row| g[row * c..(row + 1) * c].to_vec()).collect());
            }
            Op::GatherElems(x, idx) => {
                let n = self.value(*x).numel();
                self.add_grad(*x, || {
                    let mut out = vec![0.0; n];
                    for (k, &e) in idx.iter().enumerate() {
                        out[e] += g[k];
                    }
                    out
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data().to_vec();
                self.add_grad(*gamma, || {
                    let mut acc = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            acc[j] += gr[j] * hr[j];
                        }
                    }
                    acc
                });
                self.add_grad(*beta, || {
                    let mut acc = vec![0.0; c];
                    for gr in g.chunks(c) {
                        acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                self.add_grad(*x, || {
                    let mut out = vec![0.0; g.len()];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            out[r * c + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    out
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (t, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let (l, hs) = (*seq_len, *heads);
                let dh = d / hs;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = self.value(*q).data().to_vec();
                let kd = self.value(*k).data().to_vec();
                let vd = self.value(*v).data().to_vec();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; l];
                for s in 0..t / l {
                    for h in 0..hs {
                        let base = (s * hs + h) * l * l;
                        let at = |tok: usize| (s * l + tok) * d + h * dh;
                        for i in 0..l {
                            let p = &probs[base + i * l..base + (i + 1) * l];
                            let go = &g[at(i)..at(i) + dh];
                            for j in 0..l {
                                dp[j] = go.iter().zip(&vd[at(j)..at(j) + dh]).map(|(a, b)| a * b).sum();
                                for c in 0..dh {
                                    dv[at(j) + c] += p[j] * go[c];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..l {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[at(i) + c] += ds * kd[at(j) + c];
                                    dk[at(j) + c] += ds * qd[at(i) + c];
                                }
                            }
                        }
                    }
                }
                self.add_grad(*q, || dq);
                self.add_grad(*k, || dk);
                self.add_grad(*v, || dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).shape()[0] as f64;
                self.add_grad(*logits, || {
                    probs.iter().zip(targets).map(|(p, t)| g[0] * (p - t) / n).collect()
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient of the last backward pass with respect to `v`, if it
    /// requires one. Only leaves keep their gradients after backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this tape's parameter gradients into the store's buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    /// `backward` followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient_by_hand() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_writes_nothing() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let w = tape.leaf(Tensor::vector(vec![1.0]).unwrap().with_grad());
        tape.backward(c).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0).with_grad());
        let l = tape.scale(w, 2.0).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Autograd(_))));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Autograd(_))));
    }

    #[test]
    fn shared_param_accumulates_across_uses() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.mul(s, a).unwrap(); // 2w², d/dw = 4w
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[12.0]);
        // a second tape adds on top until zeroed
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        tape.backward_into(a, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[13.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing_differentiable() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::no_grad();
        let w = tape.param(&store, id);
        assert!(!tape.requires_grad(w));
    }

    #[test]
    fn cross_entropy_worked_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3], vec![1.0, 2.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[1], 0.0).unwrap();
        // -ln softmax(1,2,0)[1], high-precision reference
        assert!((tape.value(l).item().unwrap() - 0.4076059644443803).abs() < 1e-14);
        assert!(tape.cross_entropy(x, &[3], 0.0).is_err());
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new([1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let k = tape.constant(Tensor::new([1, 4], vec![0.3, 0.1, -1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new([1, 4], vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let o = tape.attention(q, k, v, 1, 2).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }
}
