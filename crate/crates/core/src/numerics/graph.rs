//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates gradients into every node that depends on a parameter.
//! Parameter gradients are then folded into the owning [`ParamStore`] with
//! [`Graph::accumulate_param_grads`].
//!
//! Operations that are hot in a transformer (linear layers, layer
//! normalization, masked multi-head attention, label-smoothed cross-entropy)
//! are fused into single tape entries with hand-written backward rules.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask for a batch of `batch` query blocks of `nq` rows,
/// each attending over `nk` keys. `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    nq: usize,
    nk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, nq: usize, nk: usize, allowed: Vec<bool>) -> Result<Self, NumericsError> {
        if allowed.len() != batch * nq * nk {
            return Err(NumericsError::Shape {
                op: "attention_mask",
                lhs: vec![batch, nq, nk],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            batch,
            nq,
            nk,
            allowed,
        })
    }

    /// Every query may attend to every key.
    pub fn full(batch: usize, nq: usize, nk: usize) -> Self {
        Self {
            batch,
            nq,
            nk,
            allowed: vec![true; batch * nq * nk],
        }
    }

    /// Lower-triangular (inclusive) mask for a single sequence of length `t`.
    pub fn causal(t: usize) -> Self {
        Self::causal_padded(&[t], t)
    }

    /// Key padding: batch element `b` may only attend to its first `key_lengths[b]` keys.
    pub fn padding(key_lengths: &[usize], nq: usize, nk: usize) -> Self {
        let mut allowed = Vec::with_capacity(key_lengths.len() * nq * nk);
        for &len in key_lengths {
            for _ in 0..nq {
                allowed.extend((0..nk).map(|j| j < len));
            }
        }
        Self {
            batch: key_lengths.len(),
            nq,
            nk,
            allowed,
        }
    }

    /// Causal self-attention over padded sequences of width `t`.
    pub fn causal_padded(lengths: &[usize], t: usize) -> Self {
        let mut allowed = Vec::with_capacity(lengths.len() * t * t);
        for &len in lengths {
            for i in 0..t {
                allowed.extend((0..t).map(|j| j <= i && j < len));
            }
        }
        Self {
            batch: lengths.len(),
            nq: t,
            nk: t,
            allowed,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn query_len(&self) -> usize {
        self.nq
    }

    pub fn key_len(&self) -> usize {
        self.nk
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.nq + i) * self.nk + j]
    }

    fn row(&self, b: usize, i: usize) -> &[bool] {
        let start = (b * self.nq + i) * self.nk;
        &self.allowed[start..start + self.nk]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Records a trainable leaf for `id`. A parameter is materialised once per
    /// graph; repeated calls return the same node so gradients from every use
    /// accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).tensor.clone(),
            grad: None,
            requires_grad: true,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w (+ b)` for `x: [*, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(NumericsError::Shape {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (m, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != n {
                return Err(NumericsError::Shape {
                    op: "linear bias",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, m, k, n);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, "linear")
    }

    /// Matrix product without bias.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.linear(a, b, None)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e * factor).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(x, factor), "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e.max(0.0)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Relu(x), "relu")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumericsError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::MulConst(x, mask), "dropout")
    }

    /// Per-row normalization over the last axis (population variance), then
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 {
            return Err(NumericsError::EmptyDimension { op: "layer_norm" });
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(NumericsError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(xv.cols()) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Softmax(x), "softmax")
    }

    /// Row gather from a `[rows, dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let rows = tv.shape()[0];
        if ids.is_empty() {
            return Err(NumericsError::EmptyDimension { op: "gather" });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(NumericsError::IdOutOfRange { id, rows });
        }
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tv.row(id));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    /// Masked scaled dot-product attention with `heads` heads.
    ///
    /// `q` is `[batch * nq, d]`, `k` and `v` are `[batch * nk, d]`. Each head
    /// works on a contiguous `d / heads` column slice and the head outputs are
    /// concatenated back into `[batch * nq, d]`. Returns the output and the
    /// attention weights `[batch, heads, nq, nk]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (b, nq, nk) = (mask.batch, mask.nq, mask.nk);
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape {
                op: "attention heads",
                lhs: vec![d],
                rhs: vec![heads],
            });
        }
        if qv.rows() != b * nq || kv.rows() != b * nk || vv.rows() != b * nk || kv.cols() != d || vv.cols() != d {
            return Err(NumericsError::Shape {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * nq * nk];
        let mut out = vec![0.0; b * nq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for bi in 0..b {
            for i in 0..nq {
                let allowed = mask.row(bi, i);
                if !allowed.iter().any(|&a| a) {
                    return Err(NumericsError::DegenerateMask { batch: bi, row: i });
                }
                let qrow = (bi * nq + i) * d;
                for h in 0..heads {
                    let p = &mut probs[((bi * heads + h) * nq + i) * nk..][..nk];
                    let qh = &qd[qrow + h * dh..qrow + (h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..nk {
                        if allowed[j] {
                            let krow = (bi * nk + j) * d + h * dh;
                            let s = dot(qh, &kd[krow..krow + dh]) * scale;
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..nk {
                        if allowed[j] {
                            p[j] = (p[j] - max).exp();
                            sum += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    let o = &mut out[qrow + h * dh..qrow + (h + 1) * dh];
                    for j in 0..nk {
                        if allowed[j] {
                            p[j] /= sum;
                            let vrow = (bi * nk + j) * d + h * dh;
                            for (oe, ve) in o.iter_mut().zip(&vd[vrow..vrow + dh]) {
                                *oe += p[j] * ve;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![b * nq, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask: mask.clone(),
                probs,
            },
            "attention",
        )
    }

    /// Attention weights `[batch, heads, nq, nk]` stored by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean label-smoothed cross-entropy over non-padding rows of `logits: [T, V]`.
    ///
    /// A `None` target marks a padding row. The smoothed distribution puts
    /// `1 - smoothing` on the target and `smoothing / (V - 1)` on each other class.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (t, vocab) = (lv.rows(), lv.cols());
        if targets.len() != t {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&id) = targets.iter().flatten().find(|&&id| id >= vocab) {
            return Err(NumericsError::TargetOutOfRange { id, vocab });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumericsError::AllPadding);
        }
        let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut loss = 0.0;
            for c in 0..vocab {
                let logp = row[c] - lse;
                p[c] = logp.exp();
                let q = if c == target { 1.0 - smoothing } else { off };
                if q != 0.0 {
                    loss -= q * logp;
                }
            }
            total += loss;
        }
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Reverse pass from the scalar node `root`, seeding its gradient with 1.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(NumericsError::Shape {
                op: "backward",
                lhs: self.nodes[root.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(grad) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            backprop(&node.op, &node.value, grad, before);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                store.add_grad(*id, g);
            }
        }
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _) | Op::MulConst(x, _) | Op::Relu(x) | Op::Sum(x) | Op::Softmax(x) => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Gather { table, .. } => vec![*table],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Runs `f` on the gradient buffer of `v`, allocating it on first use.
/// Nodes that do not require a gradient are skipped.
fn with_grad(nodes: &mut [Node], v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    f(g, &node.value);
}

fn value_of(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn backprop(op: &Op, out: &Tensor, dy: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Linear { x, w, b } => {
            let (m, k) = (value_of(nodes, *x).rows(), value_of(nodes, *x).cols());
            let n = out.cols();
            if nodes[x.0].requires_grad {
                let wv = value_of(nodes, *w).data().to_vec();
                with_grad(nodes, *x, |gx, _| matmul_nt_acc(dy, &wv, gx, m, n, k));
            }
            if nodes[w.0].requires_grad {
                let xv = value_of(nodes, *x).data().to_vec();
                with_grad(nodes, *w, |gw, _| matmul_tn_acc(&xv, dy, gw, m, k, n));
            }
            if let Some(b) = b {
                with_grad(nodes, *b, |gb, _| {
                    for row in dy.chunks_exact(n) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                });
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                with_grad(nodes, *v, |g, _| {
                    for (ge, d) in g.iter_mut().zip(dy) {
                        *ge += d;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let av = value_of(nodes, *a).data().to_vec();
            let bv = value_of(nodes, *b).data().to_vec();
            with_grad(nodes, *a, |g, _| {
                for ((ge, d), o) in g.iter_mut().zip(dy).zip(&bv) {
                    *ge += d * o;
                }
            });
            with_grad(nodes, *b, |g, _| {
                for ((ge, d), o) in g.iter_mut().zip(dy).zip(&av) {
                    *ge += d * o;
                }
            });
        }
        Op::Scale(x, factor) => with_grad(nodes, *x, |g, _| {
            for (ge, d) in g.iter_mut().zip(dy) {
                *ge += d * factor;
            }
        }),
        Op::MulConst(x, mask) => with_grad(nodes, *x, |g, _| {
            for ((ge, d), m) in g.iter_mut().zip(dy).zip(mask) {
                *ge += d * m;
            }
        }),
        Op::Relu(x) => with_grad(nodes, *x, |g, xv| {
            for ((ge, d), xe) in g.iter_mut().zip(dy).zip(xv.data()) {
                if *xe > 0.0 {
                    *ge += d;
                }
            }
        }),
        Op::Sum(x) => with_grad(nodes, *x, |g, _| {
            for ge in g.iter_mut() {
                *ge += dy[0];
            }
        }),
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.cols();
            let gv = value_of(nodes, *gain).data().to_vec();
            with_grad(nodes, *gain, |gg, _| {
                for (row_dy, row_h) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for c in 0..d {
                        gg[c] += row_dy[c] * row_h[c];
                    }
                }
            });
            with_grad(nodes, *bias, |gb, _| {
                for row_dy in dy.chunks_exact(d) {
                    for c in 0..d {
                        gb[c] += row_dy[c];
                    }
                }
            });
            with_grad(nodes, *x, |gx, _| {
                let inv_d = 1.0 / d as f64;
                let mut dxhat = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let row_dy = &dy[r * d..(r + 1) * d];
                    let row_h = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        dxhat[c] = row_dy[c] * gv[c];
                        sum_dh += dxhat[c];
                        sum_dh_h += dxhat[c] * row_h[c];
                    }
                    let gx_row = &mut gx[r * d..(r + 1) * d];
                    for c in 0..d {
                        gx_row[c] += rs * (dxhat[c] - inv_d * sum_dh - row_h[c] * inv_d * sum_dh_h);
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let n = out.cols();
            with_grad(nodes, *x, |gx, _| {
                for ((g_row, y_row), dy_row) in gx
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(dy.chunks_exact(n))
                {
                    let s = dot(y_row, dy_row);
                    for c in 0..n {
                        g_row[c] += y_row[c] * (dy_row[c] - s);
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = out.cols();
            with_grad(nodes, *table, |gt, _| {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += dy[r * d + c];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            mask,
            probs,
        } => attention_backward(nodes, (*q, *k, *v), *heads, mask, probs, dy),
        Op::CrossEntropy {
            logits,
            targets,
            smoothing,
            probs,
            count,
        } => {
            let vocab = value_of(nodes, *logits).cols();
            let off = if vocab > 1 { smoothing / (vocab - 1) as f64 } else { 0.0 };
            let scale = dy[0] / *count as f64;
            with_grad(nodes, *logits, |gl, _| {
                for (r, target) in targets.iter().enumerate() {
                    let Some(target) = *target else { continue };
                    for c in 0..vocab {
                        let q = if c == target { 1.0 - smoothing } else { off };
                        gl[r * vocab + c] += scale * (probs[r * vocab + c] - q);
                    }
                }
            });
        }
    }
}

fn attention_backward(
    nodes: &mut [Node],
    (q, k, v): (Var, Var, Var),
    heads: usize,
    mask: &AttentionMask,
    probs: &[f64],
    dy: &[f64],
) {
    let d = value_of(nodes, q).cols();
    let (b, nq, nk) = (mask.batch, mask.nq, mask.nk);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qd = value_of(nodes, q).data().to_vec();
    let kd = value_of(nodes, k).data().to_vec();
    let vd = value_of(nodes, v).data().to_vec();
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut ds = vec![0.0; nk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..nq {
                let p = &probs[((bi * heads + h) * nq + i) * nk..][..nk];
                let qrow = (bi * nq + i) * d + h * dh;
                let dout = &dy[qrow..qrow + dh];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                let mut weighted = 0.0;
                for j in 0..nk {
                    if p[j] == 0.0 && !mask.get(bi, i, j) {
                        ds[j] = 0.0;
                        continue;
                    }
                    let vrow = (bi * nk + j) * d + h * dh;
                    let dp = dot(dout, &vd[vrow..vrow + dh]);
                    ds[j] = dp;
                    weighted += p[j] * dp;
                    for (g, o) in dv[vrow..vrow + dh].iter_mut().zip(dout) {
                        *g += p[j] * o;
                    }
                }
                for j in 0..nk {
                    if !mask.get(bi, i, j) {
                        continue;
                    }
                    let s = p[j] * (ds[j] - weighted) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let krow = (bi * nk + j) * d + h * dh;
                    for c in 0..dh {
                        dq[qrow + c] += s * kd[krow + c];
                        dk[krow + c] += s * qd[qrow + c];
                    }
                }
            }
        }
    }
    for (var, g) in [(q, dq), (k, dk), (v, dv)] {
        with_grad(nodes, var, |acc, _| {
            for (a, e) in acc.iter_mut().zip(&g) {
                *a += e;
            }
        });
    }
}
