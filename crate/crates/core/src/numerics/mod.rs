//! Dense f64 tensors, a reverse-mode tape, and the transformer sublayers the
//! models are assembled from.

pub mod kernels;
mod layers;
mod mask;
mod params;
mod tape;
mod tensor;

pub use layers::{Embedding, FeedForward, KvCache, LayerNorm, Linear, MultiHeadAttention};
pub use mask::{AttentionMask, MaskMode};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{ConvGeom, Tape, Var};
pub use tensor::Tensor;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Masked scaled dot-product attention on plain tensors.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, m: &AttentionMask, mode: MaskMode) -> Result<Tensor> {
    if m.rows() != q.rows() || m.cols() != k.rows() {
        return Err(Error::Shape(format!(
            "mask {}x{} for {} queries and {} keys",
            m.rows(),
            m.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let store = ParamStore::new();
    let mut tape = Tape::inference(&store).with_mask_mode(mode);
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.masked_attention(q, k, v, &Arc::new(m.clone()))?;
    Ok(tape.value(out).clone())
}

/// Attention weight matrix (before multiplying the values).
pub fn attention_weights(q: &Tensor, k: &Tensor, m: &AttentionMask, mode: MaskMode) -> Result<Tensor> {
    let mut s = q.matmul(&k.transpose())?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    s.data_mut().iter_mut().for_each(|x| *x *= scale);
    let w = kernels::masked_softmax_rows(s.data(), s.rows(), s.cols(), Some(m), mode);
    Tensor::matrix(s.rows(), s.cols(), w)
}

pub fn softmax(x: &Tensor) -> Tensor {
    let d = kernels::masked_softmax_rows(x.data(), x.rows(), x.cols(), None, MaskMode::PreSoftmax);
    Tensor::new(x.shape().to_vec(), d).unwrap()
}

/// Row-wise layer normalization without the affine part.
pub fn layer_norm(x: &Tensor) -> Tensor {
    let (d, _) = kernels::normalize_rows(x.data(), x.rows(), x.cols());
    Tensor::new(x.shape().to_vec(), d).unwrap()
}

/// Sine/cosine position table `[length, width]` with base period 10000.
pub fn sinusoidal_positional_encoding(length: usize, width: usize) -> Result<Tensor> {
    if length == 0 {
        return Err(Error::Shape("positional encoding length must be >= 1".into()));
    }
    Tensor::matrix(length, width, kernels::sinusoidal_table(length, width))
}

impl Tensor {
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data()[i * c + j];
            }
        }
        Tensor::matrix(c, r, out).unwrap()
    }
}

#[cfg(test)]
mod tests;
