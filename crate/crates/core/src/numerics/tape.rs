//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Tape`] records every op of one forward pass. Parameters are borrowed
//! from a [`ParamStore`] rather than copied; [`Tape::backward`] returns a
//! [`Grads`] indexed by parameter id.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm};
use super::mask::{AttentionMask, MaskMode};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::ctc_lattice;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a stride-2, 3×3, pad-1 convolution over a time-major
/// `[H, C·W]` layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        self.h_in.div_ceil(2)
    }

    pub fn w_out(&self) -> usize {
        self.w_in.div_ceil(2)
    }

    fn patch(&self) -> usize {
        self.c_in * 9
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Option<Arc<AttentionMask>>,
        mode: MaskMode,
        full: Option<Vec<f64>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Reshape(Var),
    /// Cached d(loss)/d(logits); the op is linear in the upstream scalar.
    FusedLoss {
        logits: Var,
        dlogits: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
    mask_mode: MaskMode,
    finished: bool,
}

impl<'p> Tape<'p> {
    /// Tape that records gradients for every parameter it touches.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
            dropout: None,
            mask_mode: MaskMode::PreSoftmax,
            finished: false,
        }
    }

    /// Forward-only tape: nothing requires grad, dropout off.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut t = Self::new(params);
        t.grad_enabled = false;
        t
    }

    /// Enable inverted dropout with the given rate and seed.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn with_mask_mode(mut self, mode: MaskMode) -> Self {
        self.mask_mode = mode;
        self
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Position to later [`rewind`](Self::rewind) to.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop every node recorded after `mark`. Vars created after the mark
    /// become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for slot in &mut self.param_vars {
            if slot.is_some_and(|v| v.0 >= mark) {
                *slot = None;
            }
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(b).len() != cols {
            return Err(Error::Shape(format!("add_row: {} vs {cols} cols", self.value(b).len())));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(bias)
                .for_each(|(d, b)| *d += b);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect()).unwrap();
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(t, Op::Relu(x), &[x])
    }

    /// Inverted dropout; identity when the tape is not training.
    pub fn dropout(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::MulConst(x, mask), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape("layer_norm affine width".into()));
        }
        let (xhat, inv_std) = kernels::normalize_rows(self.value(x).data(), rows, cols);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % cols] + b[i % cols])
            .collect();
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Row softmax, optionally restricted by `mask` according to the tape's
    /// [`MaskMode`].
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Arc<AttentionMask>>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Shape(format!(
                    "mask {}x{} for scores {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let mode = self.mask_mode;
        let xd = self.value(x).data();
        let out = kernels::masked_softmax_rows(xd, rows, cols, mask.map(|m| &**m), mode);
        let full = match (mask, mode) {
            (Some(_), MaskMode::Literal) => Some(kernels::masked_softmax_rows(xd, rows, cols, None, mode)),
            _ => None,
        };
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            t,
            Op::MaskedSoftmax {
                x,
                mask: mask.cloned(),
                mode,
                full,
            },
            &[x],
        ))
    }

    /// Scaled dot-product attention with a binary mask.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let dk = self.dims(q).1;
        if self.dims(k).1 != dk {
            return Err(Error::Shape("query/key width".into()));
        }
        if self.dims(k).0 != self.dims(v).0 {
            return Err(Error::Shape("key/value count".into()));
        }
        let scores = self.matmul_bt(q, k)?;
        let scores = self.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = self.masked_softmax(scores, Some(mask))?;
        self.matmul(weights, v)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + width > cols {
            return Err(Error::Shape(format!("slice {start}+{width} of {cols} cols")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let t = Tensor::matrix(rows, width, data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::Shape("concat_cols row mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..start + count` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + count > rows {
            return Err(Error::Shape(format!("slice {start}+{count} of {rows} rows")));
        }
        let data = self.value(x).data()[start * cols..(start + count) * cols].to_vec();
        let t = Tensor::matrix(count, cols, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(Error::Shape("concat_rows column mismatch".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::TokenRange { id: bad, classes: n });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Label-smoothed cross entropy, averaged over rows.
    ///
    /// Each row's target distribution puts `1 - eps` on the target and spreads
    /// `eps` uniformly over all classes.
    pub fn cross_entropy_ls(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (rows, classes) = self.dims(logits);
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TokenRange { id: bad, classes });
        }
        let logp = kernels::log_softmax_rows(self.value(logits).data(), rows, classes);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; rows * classes];
        let off = eps / classes as f64;
        for r in 0..rows {
            for c in 0..classes {
                let q = off + if c == targets[r] { 1.0 - eps } else { 0.0 };
                let lp = logp[r * classes + c];
                loss -= q * lp;
                dlogits[r * classes + c] = (lp.exp() - q) / rows as f64;
            }
        }
        loss /= rows as f64;
        Ok(self.push(Tensor::scalar(loss), Op::FusedLoss { logits, dlogits }, &[logits]))
    }

    /// CTC negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn ctc_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (frames, classes) = self.dims(logits);
        let logp = kernels::log_softmax_rows(self.value(logits).data(), frames, classes);
        let fb = ctc_lattice::ctc_forward_backward(&logp, frames, classes, targets)?;
        let dlogits = logp
            .iter()
            .zip(&fb.occupancy)
            .map(|(lp, occ)| lp.exp() - occ)
            .collect();
        Ok(self.push(Tensor::scalar(fb.nll), Op::FusedLoss { logits, dlogits }, &[logits]))
    }

    /// 3×3 convolution, stride 2, zero padding 1. Input and output use a
    /// time-major `[H, C·W]` layout; `w` is `[c_out, c_in·9]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (h, cw) = self.dims(x);
        if h != geom.h_in || cw != geom.c_in * geom.w_in {
            return Err(Error::Shape(format!("conv input {h}x{cw} vs {geom:?}")));
        }
        if self.dims(w) != (geom.c_out, geom.patch()) || self.value(b).len() != geom.c_out {
            return Err(Error::Shape("conv weight shape".into()));
        }
        let cols = im2col(self.value(x).data(), geom);
        let (ho, wo, p) = (geom.h_out(), geom.w_out(), geom.patch());
        let mut prod = vec![0.0; ho * wo * geom.c_out];
        gemm(ho * wo, p, geom.c_out, &cols, false, self.value(w).data(), true, &mut prod, 0.0);
        let bias = self.value(b).data();
        let mut out = vec![0.0; ho * geom.c_out * wo];
        for i in 0..ho {
            for j in 0..wo {
                for c in 0..geom.c_out {
                    out[(i * geom.c_out + c) * wo + j] = prod[(i * wo + j) * geom.c_out + c] + bias[c];
                }
            }
        }
        let t = Tensor::matrix(ho, geom.c_out * wo, out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        self.finished = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new(self.params.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Grads) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.add_to(*id, g),
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                if needs(a) {
                    gemm(m, n, k, g, false, self.value(b).data(), true, slot(grads, a, m * k), 1.0);
                }
                if needs(b) {
                    gemm(k, m, n, self.value(a).data(), true, g, false, slot(grads, b, k * n), 1.0);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                if needs(a) {
                    gemm(m, n, k, g, false, self.value(b).data(), false, slot(grads, a, m * k), 1.0);
                }
                if needs(b) {
                    gemm(n, m, k, g, true, self.value(a).data(), false, slot(grads, b, n * k), 1.0);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if needs(b) {
                    let cols = self.value(b).len();
                    let db = slot(grads, b, cols);
                    for (j, s) in g.iter().enumerate() {
                        db[j % cols] += s;
                    }
                }
            }
            &Op::Scale(x, s) => {
                slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
            Op::MulConst(x, m) => {
                slot(grads, *x, g.len()).iter_mut().zip(g.iter().zip(m)).for_each(|(d, (v, m))| *d += v * m);
            }
            &Op::Relu(x) => {
                let y = self.value(Var(i)).data();
                slot(grads, x, g.len())
                    .iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(d, (v, y))| {
                        if *y > 0.0 {
                            *d += v
                        }
                    });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = self.dims(*x);
                let gv = self.value(*gain).data().to_vec();
                if needs(*gain) {
                    let dg = slot(grads, *gain, cols);
                    for (j, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        dg[j % cols] += gi * xh;
                    }
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, cols);
                    for (j, gi) in g.iter().enumerate() {
                        db[j % cols] += gi;
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, rows * cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dxhat: Vec<f64> = g[span.clone()].iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                        for (c, d) in dx[span.clone()].iter_mut().enumerate() {
                            *d += inv_std[r] / n * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask, mode, full } => {
                let (rows, cols) = self.dims(*x);
                let y = self.value(Var(i)).data();
                let (p, dp): (&[f64], Vec<f64>) = match (mask, mode, full) {
                    (Some(m), MaskMode::Literal, Some(full)) => (
                        full,
                        g.iter()
                            .zip(m.bits())
                            .map(|(v, &b)| if b { *v } else { 0.0 })
                            .collect(),
                    ),
                    _ => (y, g.to_vec()),
                };
                let dx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = dp[span.clone()].iter().zip(&p[span.clone()]).map(|(a, b)| a * b).sum();
                    for c in span {
                        dx[c] += p[c] * (dp[c] - dot);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (rows, cols) = self.dims(x);
                let width = g.len() / rows.max(1);
                let dx = slot(grads, x, rows * cols);
                for r in 0..rows {
                    for c in 0..width {
                        dx[r * cols + start + c] += g[r * width + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.dims(parts[0]).0;
                let total = g.len() / rows.max(1);
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if needs(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let (rows, cols) = self.dims(x);
                let dx = slot(grads, x, rows * cols);
                dx[start * cols..start * cols + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, s)| *d += s);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if needs(p) {
                        slot(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(d, s)| *d += s);
                    }
                    off += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let (n, cols) = self.dims(*table);
                let dt = slot(grads, *table, n * cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[id * cols + c] += g[r * cols + c];
                    }
                }
            }
            &Op::Sum(x) => {
                slot(grads, x, self.value(x).len()).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Reshape(x) => {
                slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::FusedLoss { logits, dlogits } => {
                slot(grads, *logits, dlogits.len())
                    .iter_mut()
                    .zip(dlogits)
                    .for_each(|(d, s)| *d += g[0] * s);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo, p, co) = (geom.h_out(), geom.w_out(), geom.patch(), geom.c_out);
                // regroup the upstream grad to (position, channel)
                let mut gm = vec![0.0; ho * wo * co];
                for ii in 0..ho {
                    for j in 0..wo {
                        for c in 0..co {
                            gm[(ii * wo + j) * co + c] = g[(ii * co + c) * wo + j];
                        }
                    }
                }
                if needs(*w) {
                    gemm(co, ho * wo, p, &gm, true, cols, false, slot(grads, *w, co * p), 1.0);
                }
                if needs(*b) {
                    let db = slot(grads, *b, co);
                    for (j, v) in gm.iter().enumerate() {
                        db[j % co] += v;
                    }
                }
                if needs(*x) {
                    let mut dcols = vec![0.0; ho * wo * p];
                    gemm(ho * wo, co, p, &gm, false, self.value(*w).data(), false, &mut dcols, 0.0);
                    col2im_add(&dcols, *geom, slot(grads, *x, geom.h_in * geom.c_in * geom.w_in));
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn im2col(x: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (ho, wo, p) = (geom.h_out(), geom.w_out(), geom.patch());
    let mut cols = vec![0.0; ho * wo * p];
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut cols[(i * wo + j) * p..(i * wo + j + 1) * p];
            for c in 0..geom.c_in {
                for kh in 0..3 {
                    let h = (2 * i + kh) as isize - 1;
                    if h < 0 || h as usize >= geom.h_in {
                        continue;
                    }
                    for kw in 0..3 {
                        let w = (2 * j + kw) as isize - 1;
                        if w < 0 || w as usize >= geom.w_in {
                            continue;
                        }
                        row[c * 9 + kh * 3 + kw] = x[(h as usize * geom.c_in + c) * geom.w_in + w as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: ConvGeom, dx: &mut [f64]) {
    let (ho, wo, p) = (geom.h_out(), geom.w_out(), geom.patch());
    for i in 0..ho {
        for j in 0..wo {
            let row = &dcols[(i * wo + j) * p..(i * wo + j + 1) * p];
            for c in 0..geom.c_in {
                for kh in 0..3 {
                    let h = (2 * i + kh) as isize - 1;
                    if h < 0 || h as usize >= geom.h_in {
                        continue;
                    }
                    for kw in 0..3 {
                        let w = (2 * j + kw) as isize - 1;
                        if w < 0 || w as usize >= geom.w_in {
                            continue;
                        }
                        dx[(h as usize * geom.c_in + c) * geom.w_in + w as usize] += row[c * 9 + kh * 3 + kw];
                    }
                }
            }
        }
    }
}
