//! Parameterized transformer sublayers built on the tape.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::mask::AttentionMask;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect()
}

/// `y = x·W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::matrix(d_in, d_out, xavier(rng, d_in, d_out)).unwrap(),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.g"), Tensor::new(vec![width], vec![1.0; width]).unwrap());
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.l1"), width, hidden, rng),
            outer: Linear::new(store, &format!("{name}.l2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h);
        self.outer.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..count * width).map(|_| rng.random_range(-0.1..0.1)).collect();
        let table = store.add(format!("{name}.table"), Tensor::matrix(count, width, data).unwrap());
        Self { table }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

/// Per-head key/value projections of an attention memory, reusable across
/// many query sets.
#[derive(Clone, Debug)]
pub struct KvCache {
    heads: Vec<(Var, Var)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append the rows of `more` after the cached rows.
    pub fn extend(&mut self, tape: &mut Tape, more: &KvCache) -> Result<()> {
        if more.heads.len() != self.heads.len() {
            return Err(Error::Shape("kv cache head count".into()));
        }
        for (h, m) in self.heads.iter_mut().zip(&more.heads) {
            h.0 = tape.concat_rows(&[h.0, m.0])?;
            h.1 = tape.concat_rows(&[h.1, m.1])?;
        }
        self.len += more.len;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub width: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            heads,
            width,
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, rng),
        })
    }

    fn head_width(&self) -> usize {
        self.width / self.heads
    }

    fn split(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let hw = self.head_width();
        if self.heads == 1 {
            return Ok(vec![x]);
        }
        (0..self.heads).map(|h| tape.slice_cols(x, h * hw, hw)).collect()
    }

    pub fn project_kv(&self, tape: &mut Tape, memory: Var) -> Result<KvCache> {
        let k = self.k.forward(tape, memory)?;
        let v = self.v.forward(tape, memory)?;
        let ks = self.split(tape, k)?;
        let vs = self.split(tape, v)?;
        Ok(KvCache {
            heads: ks.into_iter().zip(vs).collect(),
            len: tape.value(memory).rows(),
        })
    }

    pub fn attend(&self, tape: &mut Tape, x_q: Var, kv: &KvCache, mask: &Arc<AttentionMask>) -> Result<Var> {
        let q = self.q.forward(tape, x_q)?;
        let qs = self.split(tape, q)?;
        let mut outs = Vec::with_capacity(self.heads);
        for (qh, &(kh, vh)) in qs.into_iter().zip(&kv.heads) {
            outs.push(tape.masked_attention(qh, kh, vh, mask)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, cat)
    }

    pub fn forward(&self, tape: &mut Tape, x_q: Var, x_kv: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let kv = self.project_kv(tape, x_kv)?;
        self.attend(tape, x_q, &kv, mask)
    }
}
