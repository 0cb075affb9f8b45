//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so every node's parents precede it
//! and a single reverse sweep visits each node once. Matrices are row-major
//! and batched sequences are stacked example-major: example `b` occupies rows
//! `b * seq .. (b + 1) * seq`.

use super::kernels::{self, gemm, Layout};
use super::tensor::Tensor;
use crate::error::{invalid, DvpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    /// Query rows per example.
    pub q_len: usize,
    /// Key/value rows per example.
    pub kv_len: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { sources: Vec<Var>, index: Vec<(usize, usize)> },
    GroupMean { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, scale: f64, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DvpError {
    DvpError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Attention probabilities `[batch][head][query][key]` saved by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, shape, .. } => Some((probs, *shape)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), Layout::Normal, tb.data(), Layout::Transposed, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// `x * w (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        kernels::check_layer_norm(tx, tg, tb, eps)?;
        let (out, xhat, rstd) = kernels::layer_norm_parts(tx.data(), tx.cols(), tg.data(), tb.data(), eps);
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Builds a matrix whose `i`-th row is row `index[i].1` of
    /// `sources[index[i].0]`. Covers concatenation, slicing and embedding
    /// lookup.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let first = *sources.first().ok_or_else(|| invalid("gather_rows: no sources"))?;
        let cols = self.value(first).cols();
        for &s in sources {
            let t = self.value(s);
            if t.cols() != cols {
                return Err(mismatch("gather_rows", self.value(first), t));
            }
        }
        if index.is_empty() {
            return Err(invalid("gather_rows: empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = self.value(*sources.get(s).ok_or_else(|| invalid("gather_rows: bad source"))?);
            if r >= src.rows() {
                return Err(DvpError::OutOfRange {
                    what: "row",
                    value: r,
                    lo: 0,
                    hi: src.rows() - 1,
                });
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::from_parts(vec![index.len(), cols], data);
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(out, Op::Gather { sources: sources.to_vec(), index }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let index = parts
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| (0..self.value(p).rows()).map(move |r| (i, r)))
            .collect();
        self.gather_rows(parts, index)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(&[x], (start..start + len).map(|r| (0, r)).collect())
    }

    /// Mean over each consecutive block of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || !t.rows().is_multiple_of(group) {
            return Err(invalid(format!("group_mean: {} rows not divisible by {group}", t.rows())));
        }
        let (rows, c) = (t.rows() / group, t.cols());
        let mut data = vec![0.0; rows * c];
        for r in 0..t.rows() {
            let dst = &mut data[(r / group) * c..(r / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_parts(vec![rows, c], data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupMean { x, group }, rg))
    }

    /// Batched multi-head scaled dot-product attention. Head `h` uses columns
    /// `h * dh .. (h + 1) * dh` of `q`, `k` and `v`, with scores scaled by
    /// `1 / sqrt(dh)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttnShape { batch, heads, q_len, kv_len } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(invalid(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if tk.cols() != d || tv.cols() != d {
            return Err(mismatch("attention", tq, tk));
        }
        if tq.rows() != batch * q_len || tk.rows() != batch * kv_len || tv.rows() != batch * kv_len {
            return Err(invalid(format!(
                "attention: rows q={} k={} v={} do not match batch={batch} q_len={q_len} kv_len={kv_len}",
                tq.rows(),
                tk.rows(),
                tv.rows()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * q_len * kv_len];
        let mut out = vec![0.0; batch * q_len * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * q_len * kv_len;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let prow = &mut probs[pbase + i * kv_len..pbase + (i + 1) * kv_len];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(b * kv_len + j) * d + off..][..dh];
                        *p = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(b * kv_len + j) * d + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(DvpError::NonFinite { op: "attention" });
        }
        let out = Tensor::from_parts(vec![batch * q_len, d], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, shape, scale, probs }, rg))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != targets.len() {
            return Err(invalid(format!("cross_entropy: {} rows vs {} targets", t.rows(), targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(DvpError::OutOfRange { what: "target", value: bad, lo: 0, hi: c - 1 });
        }
        let probs = kernels::softmax_rows(t)?.into_data();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs[r * c + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Binary cross-entropy with logits, summed over classes and averaged
    /// over rows. `targets` has the same shape as `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", t, targets));
        }
        let loss = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / t.rows() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits { logits, targets: targets.data().to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid("backward: output must have exactly one element"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                if !trans_b {
                    let n = tb.cols();
                    acc(*a, &mut |da| gemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Transposed, 1.0, da));
                    acc(*b, &mut |db| gemm(k, m, n, ta.data(), Layout::Transposed, g, Layout::Normal, 1.0, db));
                } else {
                    let n = tb.rows();
                    acc(*a, &mut |da| gemm(m, n, k, g, Layout::Normal, tb.data(), Layout::Normal, 1.0, da));
                    acc(*b, &mut |db| gemm(n, m, k, g, Layout::Transposed, ta.data(), Layout::Normal, 1.0, db));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(tb) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(ta) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                let c = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b));
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xin = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xin) {
                        *dv += gv * kernels::gelu_grad_scalar(*xv);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let gn = self.value(*gain).data();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(c) {
                        d.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                });
                acc(*x, &mut |d| {
                    let inv_c = 1.0 / c as f64;
                    for (r, ((drow, grow), hrow)) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..c {
                            let dh = grow[j] * gn[j];
                            drow[j] += rstd[r] * (dh - inv_c * sum_dh - hrow[j] * inv_c * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gather { sources, index } => {
                let c = node.value.cols();
                for (si, &s) in sources.iter().enumerate() {
                    acc(s, &mut |d| {
                        for (out_row, &(src, r)) in index.iter().enumerate() {
                            if src == si {
                                let grow = &g[out_row * c..(out_row + 1) * c];
                                d[r * c..(r + 1) * c].iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                            }
                        }
                    });
                }
            }
            Op::GroupMean { x, group } => {
                let c = node.value.cols();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |d| {
                    for (r, drow) in d.chunks_mut(c).enumerate() {
                        let grow = &g[(r / group) * c..(r / group + 1) * c];
                        drow.iter_mut().zip(grow).for_each(|(a, b)| *a += inv * b);
                    }
                });
            }
            Op::Attention { q, k, v, shape, scale, probs } => {
                self.attention_backward(*q, *k, *v, *shape, *scale, probs, g, &mut acc);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let w = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[r * c + j] += w * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let t = self.value(*logits);
                let w = g[0] / t.rows() as f64;
                acc(*logits, &mut |d| {
                    for ((dv, z), y) in d.iter_mut().zip(t.data()).zip(targets) {
                        *dv += w * (sigmoid(*z) - y);
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        scale: f64,
        probs: &[f64],
        g: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let AttnShape { batch, heads, q_len, kv_len } = shape;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let dh = d / heads;
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * q_len * kv_len;
                for i in 0..q_len {
                    let prow = &probs[pbase + i * kv_len..pbase + (i + 1) * kv_len];
                    let grow = &g[(b * q_len + i) * d + off..][..dh];
                    let mut dot = 0.0;
                    for j in 0..kv_len {
                        let vrow = &vd[(b * kv_len + j) * d + off..][..dh];
                        let dp: f64 = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        let dvrow = &mut dv[(b * kv_len + j) * d + off..][..dh];
                        for (x, gy) in dvrow.iter_mut().zip(grow) {
                            *x += prow[j] * gy;
                        }
                    }
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    for j in 0..kv_len {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * kv_len + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * q_len + i) * d + off..][..dh];
                        for (x, kv) in dqrow.iter_mut().zip(krow) {
                            *x += s * kv;
                        }
                        let dkrow = &mut dk[(b * kv_len + j) * d + off..][..dh];
                        for (x, qv) in dkrow.iter_mut().zip(qrow) {
                            *x += s * qv;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, &dq), (k, &dk), (v, &dv)] {
            acc(var, &mut |d| d.iter_mut().zip(buf.iter()).for_each(|(a, b)| *a += b));
        }
    }
}
