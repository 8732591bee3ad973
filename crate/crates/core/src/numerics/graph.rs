//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that requires one. In no-grad mode the same ops run but
//! nothing is saved for the backward pass, which is how inference reuses
//! the training code path.

use std::sync::Arc;

use super::float::{axpy, dot, gemm, Float, MatRef};
use super::mask::AttnMask;
use super::tensor::{softmax_in_place, Tensor};
use crate::error::{bail, Result};

/// Rotary embedding base.
pub const ROPE_THETA: f64 = 10_000.0;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T: Float> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

struct AttentionSaved<T> {
    q: Var,
    keys: Vec<Var>,
    values: Vec<Var>,
    mask: Arc<AttnMask>,
    n_heads: usize,
    batch: usize,
    probs: Vec<T>,
}

enum Op<T: Float> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, factor: T },
    Silu { a: Var },
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<T> },
    ConcatCols { a: Var, b: Var },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    Rope { x: Var, positions: Vec<usize>, n_heads: usize },
    Attention(Box<AttentionSaved<T>>),
    Softmax { x: Var, inv_temp: T },
    SoftCrossEntropy { logits: Var, active_weights: Vec<T>, probs: Vec<T> },
    SmoothL1 { a: Var, b: Var, beta: T, row_weights: Vec<T> },
    Sum { a: Var },
}

/// Autodiff tape. One graph per training step (or per inference forward).
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, backward_done: false }
    }

    /// Graph that never records backward information.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    /// Leaf sharing storage with the caller (parameters, cached keys).
    pub fn leaf_arc(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Gradient-isolated view of `v`: same values, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_arc(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` when `v` is not tracked
    /// or was not reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            bail!(
                Shape,
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            bail!(Shape, "add of {:?} and {:?}", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            bail!(Shape, "mul of {:?} and {:?}", va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a [m x n] + bias [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a)?;
        let vb = self.value(bias);
        if vb.numel() != n {
            bail!(Shape, "row bias {:?} does not match {:?}", vb.shape(), self.value(a).shape());
        }
        let b = vb.data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(x, &y)| *x += y);
        }
        Ok(self.push(out, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|x| x * f);
        self.push(out, Op::Scale { a, factor: f }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(out, Op::Silu { a }, &[a])
    }

    /// Row-wise RMS normalization scaled by `weight [n]`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(weight).numel() != n {
            bail!(Shape, "rms_norm weight {:?} vs input {:?}", self.value(weight).shape(), self.value(x).shape());
        }
        let w = self.value(weight).data();
        let xs = self.value(x).data();
        let eps = T::of(eps);
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        let nf = T::of(n as f64);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..n {
                out[r * n + c] = row[c] * inv * w[c];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::RmsNorm { x, weight, inv_rms }, &[x, weight]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a)?;
        let (m2, q) = self.dims2(b)?;
        if m != m2 {
            bail!(Shape, "concat_cols of {:?} and {:?}", self.value(a).shape(), self.value(b).shape());
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        let out = Tensor::new(vec![m, p + q], out)?;
        Ok(self.push(out, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Rows of `table [V x d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            bail!(Parameter, "token id {bad} outside vocabulary of {v}");
        }
        let out = self.value(table).select_rows(ids);
        debug_assert_eq!(out.cols(), d);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Output row `r` is `x[index[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= m) {
            bail!(Shape, "gather row {bad} from {m} rows");
        }
        let vx = self.value(x);
        let mut out = vec![T::zero(); index.len() * n];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[r * n..(r + 1) * n].copy_from_slice(vx.row(*s));
            }
        }
        let out = Tensor::new(vec![index.len(), n], out)?;
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Rotary position embedding on adjacent pairs inside each head.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize) -> Result<Var> {
        let (m, width) = self.dims2(x)?;
        if positions.len() != m {
            bail!(Shape, "rope got {} positions for {} rows", positions.len(), m);
        }
        if n_heads == 0 || !width.is_multiple_of(n_heads) || !(width / n_heads).is_multiple_of(2) {
            bail!(Shape, "rope width {width} not divisible into {n_heads} even heads");
        }
        let mut out = self.value(x).clone();
        rotate(out.data_mut(), positions, width, n_heads, false);
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), n_heads }, &[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` has `batch * mask.queries()` rows. Key/value blocks are
    /// concatenated logically in the given order: block `i` holds
    /// `batch * s_i` rows and `sum(s_i) == mask.keys()`. The mask is shared
    /// by every batch segment. Forbidden keys are never visited, so they
    /// contribute exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        mask: Arc<AttnMask>,
        n_heads: usize,
        batch: usize,
    ) -> Result<Var> {
        let (rows, width) = self.dims2(q)?;
        let sq = mask.queries();
        if batch == 0 || rows != batch * sq {
            bail!(Shape, "attention query rows {rows} != batch {batch} x mask queries {sq}");
        }
        if n_heads == 0 || width % n_heads != 0 {
            bail!(Shape, "attention width {width} not divisible by {n_heads} heads");
        }
        if keys.len() != values.len() || keys.is_empty() {
            bail!(Shape, "attention needs matching non-empty key/value block lists");
        }
        let mut block_len = Vec::with_capacity(keys.len());
        for (&k, &v) in keys.iter().zip(values) {
            let (kr, kw) = self.dims2(k)?;
            let (vr, vw) = self.dims2(v)?;
            if kw != width || vw != width || kr != vr || kr % batch != 0 {
                bail!(
                    Shape,
                    "attention key {:?} / value {:?} incompatible with query {:?} and batch {batch}",
                    self.value(k).shape(),
                    self.value(v).shape(),
                    self.value(q).shape()
                );
            }
            block_len.push(kr / batch);
        }
        if block_len.iter().sum::<usize>() != mask.keys() {
            bail!(Shape, "attention blocks hold {} keys but the mask expects {}", block_len.iter().sum::<usize>(), mask.keys());
        }
        let lookup = key_lookup(&block_len);
        let row_off = row_offsets(&mask);
        let nnz = mask.nnz();
        let dh = width / n_heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let qd = self.value(q).data();
        let kd: Vec<&[T]> = keys.iter().map(|&k| self.value(k).data()).collect();
        let vd: Vec<&[T]> = values.iter().map(|&v| self.value(v).data()).collect();
        let mut probs = vec![T::zero(); batch * n_heads * nnz];
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for i in 0..sq {
                let ks = mask.row(i);
                for h in 0..n_heads {
                    let qrow = &qd[(b * sq + i) * width + h * dh..][..dh];
                    let p = &mut probs[(b * n_heads + h) * nnz + row_off[i]..][..ks.len()];
                    let mut max = T::neg_infinity();
                    for (t, &c) in ks.iter().enumerate() {
                        let (blk, loc) = lookup[c as usize];
                        let krow = &kd[blk][(b * block_len[blk] + loc) * width + h * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        p[t] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::zero();
                    for pt in p.iter_mut() {
                        *pt = (*pt - max).exp();
                        sum += *pt;
                    }
                    let inv = T::one() / sum;
                    p.iter_mut().for_each(|pt| *pt *= inv);
                    let orow = &mut out[(b * sq + i) * width + h * dh..][..dh];
                    for (t, &c) in ks.iter().enumerate() {
                        let (blk, loc) = lookup[c as usize];
                        let vrow = &vd[blk][(b * block_len[blk] + loc) * width + h * dh..][..dh];
                        axpy(p[t], vrow, orow);
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, width], out)?;
        let mut inputs = vec![q];
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        let saved = AttentionSaved { q, keys: keys.to_vec(), values: values.to_vec(), mask, n_heads, batch, probs };
        Ok(self.push(out, Op::Attention(Box::new(saved)), &inputs))
    }

    /// Row-wise softmax at a positive temperature.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            bail!(Parameter, "graph softmax needs a positive temperature, got {temperature}");
        }
        let (_, n) = self.dims2(x)?;
        let inv_temp = T::of(1.0 / temperature);
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row, inv_temp);
        }
        Ok(self.push(out, Op::Softmax { x, inv_temp }, &[x]))
    }

    /// `-sum_{r,v} w[r,v] * log(max(softmax(logits)[r,v], eps))`.
    ///
    /// With `eps == 0` no clamping happens and the log-softmax is used
    /// directly. Clamped entries carry no gradient.
    pub fn soft_cross_entropy(&mut self, logits: Var, weights: &Tensor<T>, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(logits)?;
        if weights.shape() != [m, n] {
            bail!(Shape, "cross-entropy weights {:?} vs logits {:?}", weights.shape(), self.value(logits).shape());
        }
        let ld = self.value(logits).data();
        let log_eps = if eps > 0.0 { T::of(eps.ln()) } else { T::neg_infinity() };
        let mut probs = vec![T::zero(); m * n];
        let mut active = weights.data().to_vec();
        let mut total = T::zero();
        for r in 0..m {
            let row = &ld[r * n..(r + 1) * n];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..n {
                let lp = row[c] - lse;
                probs[r * n + c] = lp.exp();
                let w = weights.data()[r * n + c];
                if lp < log_eps {
                    active[r * n + c] = T::zero();
                    if w != T::zero() {
                        total -= w * log_eps;
                    }
                } else if w != T::zero() {
                    total -= w * lp;
                }
            }
        }
        let out = Tensor::scalar(total);
        Ok(self.push(out, Op::SoftCrossEntropy { logits, active_weights: active, probs }, &[logits]))
    }

    /// `sum_r row_weights[r] * mean_c huber_beta(a[r,c] - b[r,c])`.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64, row_weights: &[T]) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(b).shape() != [m, n] || row_weights.len() != m {
            bail!(
                Shape,
                "smooth_l1 of {:?} and {:?} with {} row weights",
                self.value(a).shape(),
                self.value(b).shape(),
                row_weights.len()
            );
        }
        let beta_t = T::of(beta);
        let half = T::of(0.5);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let inv_n = T::of(1.0 / n as f64);
        let mut total = T::zero();
        for r in 0..m {
            let w = row_weights[r];
            if w == T::zero() {
                continue;
            }
            let mut acc = T::zero();
            for c in 0..n {
                let d = (va[r * n + c] - vb[r * n + c]).abs();
                acc += if d < beta_t { half * d * d / beta_t } else { d - half * beta_t };
            }
            total += w * acc * inv_n;
        }
        Ok(self.push(Tensor::scalar(total), Op::SmoothL1 { a, b, beta: beta_t, row_weights: row_weights.to_vec() }, &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Gradients land on every node
    /// that requires one and was reached. A second call without
    /// [`reset_grads`](Self::reset_grads) is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            bail!(Graph, "backward already ran on this graph; call reset_grads first");
        }
        if !self.value(loss).is_scalar() {
            bail!(Shape, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.cols();
                let ga = MatRef::new(g, m, n);
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    let bv = MatRef::new(nodes[b.0].value.data(), k, n);
                    gemm(ga, bv.t(), buf, true);
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    let av = MatRef::new(nodes[a.0].value.data(), m, k);
                    gemm(av.t(), ga, buf, true);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(buf) = grad_buf(grads, nodes, *v) {
                        buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for ((d, &y), &gy) in buf.iter_mut().zip(vb).zip(g) {
                        *d += gy * y;
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    for ((d, &x), &gy) in buf.iter_mut().zip(va).zip(g) {
                        *d += gy * x;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let n = out.cols();
                if let Some(buf) = grad_buf(grads, nodes, *bias) {
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    buf.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor);
                }
            }
            Op::Silu { a } => {
                let xs = nodes[a.0].value.data();
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for ((d, &x), &gy) in buf.iter_mut().zip(xs).zip(g) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *d += gy * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (m, n) = out.dims2().unwrap();
                let xs = nodes[x.0].value.data();
                let w = nodes[weight.0].value.data();
                let nf = T::of(n as f64);
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for r in 0..m {
                        let inv = inv_rms[r];
                        let row = &xs[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let proj = (0..n).map(|c| gr[c] * w[c] * row[c] * inv).sum::<T>() / nf;
                        for c in 0..n {
                            let xhat = row[c] * inv;
                            buf[r * n + c] += inv * (gr[c] * w[c] - xhat * proj);
                        }
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *weight) {
                    for r in 0..m {
                        for c in 0..n {
                            buf[c] += g[r * n + c] * xs[r * n + c] * inv_rms[r];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, p) = nodes[a.0].value.dims2().unwrap();
                let q = nodes[b.0].value.cols();
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for r in 0..m {
                        axpy(T::one(), &g[r * (p + q)..r * (p + q) + p], &mut buf[r * p..(r + 1) * p]);
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    for r in 0..m {
                        axpy(T::one(), &g[r * (p + q) + p..(r + 1) * (p + q)], &mut buf[r * q..(r + 1) * q]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(buf) = grad_buf(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut buf[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let n = out.cols();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            axpy(T::one(), &g[r * n..(r + 1) * n], &mut buf[s * n..(s + 1) * n]);
                        }
                    }
                }
            }
            Op::Rope { x, positions, n_heads } => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    let mut gi = g.to_vec();
                    rotate(&mut gi, positions, out.cols(), *n_heads, true);
                    buf.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::Softmax { x, inv_temp } => {
                let n = out.cols();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (r, y) in out.data().chunks(n).enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let s: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            buf[r * n + c] += y[c] * (gr[c] - s) * *inv_temp;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, active_weights, probs } => {
                let n = nodes[logits.0].value.cols();
                let up = g[0];
                if let Some(buf) = grad_buf(grads, nodes, *logits) {
                    for (r, w) in active_weights.chunks(n).enumerate() {
                        let total: T = w.iter().copied().sum();
                        if total == T::zero() {
                            continue;
                        }
                        for c in 0..n {
                            buf[r * n + c] += up * (probs[r * n + c] * total - w[c]);
                        }
                    }
                }
            }
            Op::SmoothL1 { a, b, beta, row_weights } => {
                let n = nodes[a.0].value.cols();
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let inv_n = T::of(1.0 / n as f64);
                let up = g[0];
                let local: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .enumerate()
                    .map(|(idx, (&x, &y))| {
                        let w = row_weights[idx / n];
                        let d = x - y;
                        let dd = if d.abs() < *beta { d / *beta } else { d.signum() };
                        up * w * inv_n * dd
                    })
                    .collect();
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    buf.iter_mut().zip(&local).for_each(|(x, &y)| *x += y);
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    buf.iter_mut().zip(&local).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Sum { a } => {
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    buf.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let width = nodes[s.q.0].value.cols();
        let dh = width / s.n_heads;
        let sq = s.mask.queries();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let block_len: Vec<usize> = s.keys.iter().map(|k| nodes[k.0].value.rows() / s.batch).collect();
        let lookup = key_lookup(&block_len);
        let row_off = row_offsets(&s.mask);
        let nnz = s.mask.nnz();
        let qd = nodes[s.q.0].value.data();
        let kd: Vec<&[T]> = s.keys.iter().map(|k| nodes[k.0].value.data()).collect();
        let vd: Vec<&[T]> = s.values.iter().map(|v| nodes[v.0].value.data()).collect();

        let mut dq = vec![T::zero(); qd.len()];
        let mut dk: Vec<Vec<T>> = kd.iter().map(|k| vec![T::zero(); k.len()]).collect();
        let mut dv: Vec<Vec<T>> = vd.iter().map(|v| vec![T::zero(); v.len()]).collect();
        let mut dp = Vec::new();
        for b in 0..s.batch {
            for i in 0..sq {
                let ks = s.mask.row(i);
                for h in 0..s.n_heads {
                    let base = (b * sq + i) * width + h * dh;
                    let grow = &g[base..base + dh];
                    let qrow = &qd[base..base + dh];
                    let p = &s.probs[(b * s.n_heads + h) * nnz + row_off[i]..][..ks.len()];
                    dp.clear();
                    for &c in ks {
                        let (blk, loc) = lookup[c as usize];
                        let off = (b * block_len[blk] + loc) * width + h * dh;
                        dp.push(dot(grow, &vd[blk][off..off + dh]));
                    }
                    let centre: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for (t, &c) in ks.iter().enumerate() {
                        let (blk, loc) = lookup[c as usize];
                        let off = (b * block_len[blk] + loc) * width + h * dh;
                        let ds = p[t] * (dp[t] - centre) * scale;
                        axpy(ds, &kd[blk][off..off + dh], &mut dq[base..base + dh]);
                        axpy(ds, qrow, &mut dk[blk][off..off + dh]);
                        axpy(p[t], grow, &mut dv[blk][off..off + dh]);
                    }
                }
            }
        }
        accumulate(grads, nodes, s.q, &dq);
        for (k, d) in s.keys.iter().zip(&dk) {
            accumulate(grads, nodes, *k, d);
        }
        for (v, d) in s.values.iter().zip(&dv) {
            accumulate(grads, nodes, *v, d);
        }
    }
}

fn grad_buf<'a, T: Float>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, local: &[T]) {
    if let Some(buf) = grad_buf(grads, nodes, v) {
        buf.iter_mut().zip(local).for_each(|(a, &b)| *a += b);
    }
}

fn key_lookup(block_len: &[usize]) -> Vec<(usize, usize)> {
    block_len.iter().enumerate().flat_map(|(b, &n)| (0..n).map(move |l| (b, l))).collect()
}

fn row_offsets(mask: &AttnMask) -> Vec<usize> {
    let mut off = Vec::with_capacity(mask.queries());
    let mut acc = 0;
    for i in 0..mask.queries() {
        off.push(acc);
        acc += mask.row(i).len();
    }
    off
}

/// Applies (or with `inverse`, undoes) the rotary rotation in place.
fn rotate<T: Float>(data: &mut [T], positions: &[usize], width: usize, n_heads: usize, inverse: bool) {
    let dh = width / n_heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| ROPE_THETA.powf(-2.0 * i as f64 / dh as f64)).collect();
    let mut cs = vec![(T::zero(), T::zero()); half];
    for (r, &pos) in positions.iter().enumerate() {
        for (i, f) in inv_freq.iter().enumerate() {
            let (s, c) = (pos as f64 * f).sin_cos();
            cs[i] = (T::of(c), T::of(if inverse { -s } else { s }));
        }
        let row = &mut data[r * width..(r + 1) * width];
        for h in 0..n_heads {
            for (i, &(c, s)) in cs.iter().enumerate() {
                let j = h * dh + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
