//! Plain-slice kernels shared by the autodiff tape and the no-grad helpers.

use super::mask::{AttentionMask, MaskMode};

/// `c = a·b + beta·c` with optional transposes. `a` is logically `m×k`,
/// `b` is logically `k×n`; a transposed operand is stored the other way round.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the checked slice extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax restricted to the mask support (or plain softmax when
/// `mask` is `None`). Blocked entries come out as exactly zero.
pub fn masked_softmax_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    mask: Option<&AttentionMask>,
    mode: MaskMode,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let permitted = |c: usize| match (mask, mode) {
            (Some(m), MaskMode::PreSoftmax) => m.get(r, c),
            _ => true,
        };
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in xr.iter().enumerate() {
            if permitted(c) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for c in 0..cols {
            if permitted(c) {
                let e = (xr[c] - max).exp();
                or[c] = e;
                sum += e;
            }
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
        if let (Some(m), MaskMode::Literal) = (mask, mode) {
            for (c, v) in or.iter_mut().enumerate() {
                if !m.get(r, c) {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// Sinusoidal position table, `[length, width]`, base period 10000.
pub fn sinusoidal_table(length: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; length * width];
    for pos in 0..length {
        for i in (0..width).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / width as f64);
            let angle = pos as f64 * freq;
            out[pos * width + i] = angle.sin();
            if i + 1 < width {
                out[pos * width + i + 1] = angle.cos();
            }
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise normalization without the affine part. Returns `(xhat, inv_std)`.
pub fn normalize_rows(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[r] = is;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
