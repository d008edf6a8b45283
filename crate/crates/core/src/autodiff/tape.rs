use rand::distributions::{Bernoulli, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::gemm;
use super::{Mode, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Row,
    Col,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var, Broadcast),
    Mul(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mean(Var, Option<usize>),
    Sum(Var),
    Gather(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    FeatureScale(Var, Var),
    AddTiled(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] walks it once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Pre-dropout attention weights recorded by [`Tape::attention`], laid
    /// out as `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad || matches!(op, Op::Attention { .. }) {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        let shape = self.nodes[v.0].value.shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(format!("expected a matrix, got {shape:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b` is either the same shape, a `1×n` row broadcast over
    /// the rows of `a`, or an `m×1` column broadcast over its columns.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (bm, bn) = self.dims(b)?;
        let kind = if (bm, bn) == (m, n) {
            Broadcast::Same
        } else if bm == 1 && bn == n {
            Broadcast::Row
        } else if bn == 1 && bm == m {
            Broadcast::Col
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {bm}x{bn} onto {m}x{n}"
            )));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = av.to_vec();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += match kind {
                    Broadcast::Same => bv[r * n + c],
                    Broadcast::Row => bv[c],
                    Broadcast::Col => bv[r],
                };
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::AddBroadcast(a, b, kind), &[a, b]))
    }

    /// `x · w + b`, with `b` a `1×n` row when present.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(Error::shape(format!(
                    "concat_cols row mismatch: {pm} vs {m}"
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::matrix(m, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat of zero tensors"));
        };
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {pn} vs {n}"
                )));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, n, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean over `axis` (0 = down the rows, giving `1×n`; 1 = across
    /// columns, giving `m×1`) or over everything when `axis` is `None`.
    pub fn reduce_mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let src = self.value(x).data();
        let value = match axis {
            None => {
                if src.is_empty() {
                    return Err(Error::shape("mean of an empty tensor"));
                }
                Tensor::scalar(src.iter().sum::<f64>() / src.len() as f64)
            }
            Some(0) => {
                if m == 0 {
                    return Err(Error::shape("mean over zero rows"));
                }
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] += src[r * n + c];
                    }
                }
                out.iter_mut().for_each(|v| *v /= m as f64);
                Tensor::matrix(1, n, out)?
            }
            Some(1) => {
                if n == 0 {
                    return Err(Error::shape("mean over zero columns"));
                }
                let out = (0..m)
                    .map(|r| src[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::matrix(m, 1, out)?
            }
            Some(a) => return Err(Error::shape(format!("axis {a} on a matrix"))),
        };
        Ok(self.push(value, Op::Mean(x, axis), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Gathers rows of `x`; the backward pass scatter-adds into them.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::Bounds { index: i, len: v });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::matrix(idx.len(), d, out)?;
        Ok(self.push(value, Op::Gather(x, idx.to_vec()), &[x]))
    }

    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("batch norm affine width mismatch"));
        }
        if state.running_mean.len() != d {
            return Err(Error::shape("batch norm running state width mismatch"));
        }
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateBatch);
        }
        let src = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for r in 0..m {
                for c in 0..d {
                    mean[c] += src[r * d + c];
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for r in 0..m {
                for c in 0..d {
                    let dv = src[r * d + c] - mean[c];
                    var[c] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let unbias = m as f64 / (m as f64 - 1.0);
            for c in 0..d {
                state.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
                state.running_var[c] =
                    (1.0 - BN_MOMENTUM) * state.running_var[c] + BN_MOMENTUM * var[c] * unbias;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (src[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::matrix(m, d, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-row normalization over the columns.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer norm affine width mismatch"));
        }
        if d == 0 {
            return Err(Error::shape("layer norm over zero columns"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            inv_std[r] = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (row[c] - mean) * inv_std[r];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::matrix(m, d, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        check_drop_prob(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let src = self.value(x);
        let mask = dropout_mask(src.len(), p, rng);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits)?;
        if labels.len() != m {
            return Err(Error::shape(format!(
                "{} labels for {m} rows",
                labels.len()
            )));
        }
        if m == 0 {
            return Err(Error::shape("cross entropy of an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Bounds { index: bad, len: c });
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &self.value(logits).data()[r * c..(r + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Per-feature scaling used by the feature tokenizer: for `x` of shape
    /// `m×n` and `w` of shape `n×d`, row `i·n + j` of the `(m·n)×d` output is
    /// `x[i,j] · w[j,:]`.
    pub fn feature_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let (wn, d) = self.dims(w)?;
        if wn != n {
            return Err(Error::shape(format!(
                "feature_scale: {n} features but {wn} weight rows"
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m * n * d];
        for i in 0..m {
            for j in 0..n {
                let s = xv[i * n + j];
                let dst = &mut out[(i * n + j) * d..(i * n + j + 1) * d];
                for (o, wv) in dst.iter_mut().zip(&wv[j * d..(j + 1) * d]) {
                    *o = s * wv;
                }
            }
        }
        let value = Tensor::matrix(m * n, d, out)?;
        Ok(self.push(value, Op::FeatureScale(x, w), &[x, w]))
    }

    /// Adds the `n×d` matrix `b` to every consecutive block of `n` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, d) = self.dims(a)?;
        let (n, bd) = self.dims(b)?;
        if bd != d || n == 0 || rows % n != 0 {
            return Err(Error::shape(format!(
                "add_tiled of {n}x{bd} onto {rows}x{d}"
            )));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            let t = r % n;
            for c in 0..d {
                out[r * d + c] += bv[t * d + c];
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(value, Op::AddTiled(a, b), &[a, b]))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq_len` tokens. `q`, `k`, `v` are `(batch·seq_len)×d` with the heads
    /// laid side by side along the columns. `attn_dropout` is applied to the
    /// attention weights in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        attn_dropout: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        check_drop_prob(attn_dropout)?;
        let (rows, d) = self.dims(q)?;
        if self.dims(k)? != (rows, d) || self.dims(v)? != (rows, d) {
            return Err(Error::shape("attention q/k/v shape mismatch"));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!(
                "{rows} rows do not split into sequences of {seq_len}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{d} columns over {heads} heads")));
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let t = seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![0.0; batch * heads * t * t];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * t * t;
                for i in 0..t {
                    let qi = &qv[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    let row = &mut probs[base + i * t..base + (i + 1) * t];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                }
            }
        }
        let mask = if mode == Mode::Train && attn_dropout > 0.0 {
            Some(dropout_mask(probs.len(), attn_dropout, rng))
        } else {
            None
        };
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * t * t;
                for i in 0..t {
                    let dst = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for j in 0..t {
                        let p = probs[base + i * t + j] * mask.as_ref().map_or(1.0, |m| m[base + i * t + j]);
                        let vj = &vv[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        for (o, x) in dst.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
                mask,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; call [`Tape::zero_grad`] to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((i, g));
                continue;
            }
            let mut acc = Acc {
                grads: &mut grads,
                nodes: &self.nodes,
            };
            backward_node(&node.op, &node.value, &g, &mut acc);
        }
        for (i, g) in leaf_updates {
            match &mut self.nodes[i].grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn check_drop_prob(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Inverted-dropout multipliers: `0` with probability `p`, else `1/(1-p)`.
fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    let drop = Bernoulli::new(p).expect("probability checked");
    (0..len).map(|_| if drop.sample(rng) { 0.0 } else { keep }).collect()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Row-wise softmax of a row-major matrix with `cols` columns.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    if cols > 0 {
        out.chunks_mut(cols).for_each(softmax_in_place);
    }
    out
}

struct Acc<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl Acc<'_> {
    /// Gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

fn backward_node(op: &Op, out: &Tensor, g: &[f64], acc: &mut Acc<'_>) {
    match op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::MatMul(a, b) => {
            let (m, k) = (acc.value(*a).rows(), acc.value(*a).cols());
            let n = acc.value(*b).cols();
            let nodes = acc.nodes;
            if let Some(da) = acc.slot(*a) {
                gemm(m, n, k, g, false, nodes[b.0].value.data(), true, da, 1.0);
            }
            if let Some(db) = acc.slot(*b) {
                gemm(k, m, n, nodes[a.0].value.data(), true, g, false, db, 1.0);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = acc.slot(v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::AddBroadcast(a, b, kind) => {
            let (m, n) = (out.rows(), out.cols());
            if let Some(da) = acc.slot(*a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = acc.slot(*b) {
                for r in 0..m {
                    for c in 0..n {
                        let gi = g[r * n + c];
                        match kind {
                            Broadcast::Same => db[r * n + c] += gi,
                            Broadcast::Row => db[c] += gi,
                            Broadcast::Col => db[r] += gi,
                        }
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let nodes = acc.nodes;
            if let Some(da) = acc.slot(*a) {
                let bv = nodes[b.0].value.data();
                for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            }
            if let Some(db) = acc.slot(*b) {
                let av = nodes[a.0].value.data();
                for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            }
        }
        Op::Relu(x) => {
            let nodes = acc.nodes;
            if let Some(dx) = acc.slot(*x) {
                let xv = nodes[x.0].value.data();
                for ((d, g), v) in dx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = (out.rows(), out.cols());
            let mut offset = 0;
            for &p in parts {
                let w = acc.value(p).cols();
                if let Some(dp) = acc.slot(p) {
                    for r in 0..m {
                        for c in 0..w {
                            dp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = acc.value(p).len();
                if let Some(dp) = acc.slot(p) {
                    dp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::Mean(x, axis) => {
            let (m, n) = (acc.value(*x).rows(), acc.value(*x).cols());
            if let Some(dx) = acc.slot(*x) {
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] += match axis {
                            None => g[0] / (m * n) as f64,
                            Some(0) => g[c] / m as f64,
                            _ => g[r] / n as f64,
                        };
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = acc.slot(*x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Gather(x, idx) => {
            let d = out.cols();
            if let Some(dx) = acc.slot(*x) {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += g[r * d + c];
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (m, d) = (out.rows(), out.cols());
            if let Some(dg) = acc.slot(*gamma) {
                for r in 0..m {
                    for c in 0..d {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if let Some(db) = acc.slot(*beta) {
                for r in 0..m {
                    for c in 0..d {
                        db[c] += g[r * d + c];
                    }
                }
            }
            let nodes = acc.nodes;
            if let Some(dx) = acc.slot(*x) {
                let gv = nodes[gamma.0].value.data();
                if *train {
                    let mf = m as f64;
                    for c in 0..d {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for r in 0..m {
                            let dxh = g[r * d + c] * gv[c];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + c];
                        }
                        for r in 0..m {
                            let dxh = g[r * d + c] * gv[c];
                            dx[r * d + c] +=
                                inv_std[c] / mf * (mf * dxh - s1 - xhat[r * d + c] * s2);
                        }
                    }
                } else {
                    for r in 0..m {
                        for c in 0..d {
                            dx[r * d + c] += g[r * d + c] * gv[c] * inv_std[c];
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (m, d) = (out.rows(), out.cols());
            if let Some(dg) = acc.slot(*gamma) {
                for r in 0..m {
                    for c in 0..d {
                        dg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                }
            }
            if let Some(db) = acc.slot(*beta) {
                for r in 0..m {
                    for c in 0..d {
                        db[c] += g[r * d + c];
                    }
                }
            }
            let nodes = acc.nodes;
            if let Some(dx) = acc.slot(*x) {
                let gv = nodes[gamma.0].value.data();
                let df = d as f64;
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        let dxh = g[r * d + c] * gv[c];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + c];
                    }
                    for c in 0..d {
                        let dxh = g[r * d + c] * gv[c];
                        dx[r * d + c] += inv_std[r] / df * (df * dxh - s1 - xhat[r * d + c] * s2);
                    }
                }
            }
        }
        Op::Dropout(x, mask) => {
            if let Some(dx) = acc.slot(*x) {
                for ((d, g), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let c = acc.value(*logits).cols();
            let m = labels.len();
            let scale = g[0] / m as f64;
            if let Some(dl) = acc.slot(*logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for k in 0..c {
                        let target = if k == y { 1.0 } else { 0.0 };
                        dl[r * c + k] += scale * (probs[r * c + k] - target);
                    }
                }
            }
        }
        Op::FeatureScale(x, w) => {
            let (m, n) = (acc.value(*x).rows(), acc.value(*x).cols());
            let d = acc.value(*w).cols();
            let nodes = acc.nodes;
            if let Some(dx) = acc.slot(*x) {
                let wv = nodes[w.0].value.data();
                for i in 0..m {
                    for j in 0..n {
                        let gr = &g[(i * n + j) * d..(i * n + j + 1) * d];
                        dx[i * n + j] += gr
                            .iter()
                            .zip(&wv[j * d..(j + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            if let Some(dw) = acc.slot(*w) {
                let xv = nodes[x.0].value.data();
                for i in 0..m {
                    for j in 0..n {
                        let s = xv[i * n + j];
                        let gr = &g[(i * n + j) * d..(i * n + j + 1) * d];
                        for (dst, gv) in dw[j * d..(j + 1) * d].iter_mut().zip(gr) {
                            *dst += s * gv;
                        }
                    }
                }
            }
        }
        Op::AddTiled(a, b) => {
            let d = out.cols();
            let n = acc.value(*b).rows();
            if let Some(da) = acc.slot(*a) {
                da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(db) = acc.slot(*b) {
                for r in 0..out.rows() {
                    let t = r % n;
                    for c in 0..d {
                        db[t * d + c] += g[r * d + c];
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
            mask,
        } => attention_backward(acc, out, g, (*q, *k, *v), *seq_len, *heads, probs, mask.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    acc: &mut Acc<'_>,
    out: &Tensor,
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    t: usize,
    heads: usize,
    probs: &[f64],
    mask: Option<&[f64]>,
) {
    let (rows, d) = (out.rows(), out.cols());
    let batch = rows / t;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nodes = acc.nodes;
    let qv = nodes[q.0].value.data();
    let kv = nodes[k.0].value.data();
    let vv = nodes[v.0].value.data();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; t * t];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * t * t;
            let col = |r: usize| (b * t + r) * d + h * dh;
            // d(masked probs) = dO · Vᵀ, dV = (masked probs)ᵀ · dO
            for i in 0..t {
                let gi = &g[col(i)..col(i) + dh];
                for j in 0..t {
                    let vj = &vv[col(j)..col(j) + dh];
                    let m = mask.map_or(1.0, |m| m[base + i * t + j]);
                    dp[i * t + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() * m;
                    let pm = probs[base + i * t + j] * m;
                    for (dst, gv) in dv[col(j)..col(j) + dh].iter_mut().zip(gi) {
                        *dst += pm * gv;
                    }
                }
            }
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..t {
                let p = &probs[base + i * t..base + (i + 1) * t];
                let row = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                for (r, pv) in row.iter_mut().zip(p) {
                    *r = pv * (*r - dot) * scale;
                }
            }
            for i in 0..t {
                for j in 0..t {
                    let s = dp[i * t + j];
                    let (qi, kj) = (col(i), col(j));
                    for c in 0..dh {
                        dq[qi + c] += s * kv[kj + c];
                        dk[kj + c] += s * qv[qi + c];
                    }
                }
            }
        }
    }
    for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = acc.slot(var) {
            dst.iter_mut().zip(&grad).for_each(|(d, g)| *d += g);
        }
    }
}
