//! Forward kernels shared by the standalone operations and the tape.

use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c = beta * c + op(a) * op(b)` on row-major slices.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly the m x k, k x n and m x n row-major (or transposed) layouts.
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

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place numerically stable softmax of one slice.
pub fn softmax_slice(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(x)))` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax along `axis` of an arbitrary-rank tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len().max(1) {
        return Err(Error::argument(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::numeric("softmax input contains non-finite values"));
    }
    let len = shape.get(axis).copied().unwrap_or(x.len());
    let inner: usize = shape.iter().skip(axis + 1).product();
    let outer: usize = shape.iter().take(axis).product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_slice(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Per-row normalization statistics kept for the backward pass.
pub struct NormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the last dimension.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for c in 0..cols {
            let n = (row[c] - mean) * istd;
            normalized[r * cols + c] = n;
            out[r * cols + c] = n * gain[c] + bias[c];
        }
    }
    (out, NormStats { normalized, inv_std })
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm gain/bias must have {d} entries, got {} and {}",
            gain.len(),
            bias.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::argument("layer_norm eps must be positive"));
    }
    let (out, _) = layer_norm_rows(x.data(), d, gain.data(), bias.data(), eps);
    Tensor::new(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// One block of attention: query rows `q_rows` attend to key rows `kv_rows`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_rows: Range<usize>,
    pub kv_rows: Range<usize>,
}

/// Scaled dot-product attention over already-projected inputs.
///
/// `q` is `rq x d`, `k`/`v` are `rk x d`, heads split the columns. Returns the
/// output and the softmax weights laid out segment by segment, head-major.
/// `keep` holds per-weight dropout multipliers in the same layout.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    segments: &[AttnSegment],
    key_mask: Option<&[bool]>,
    keep: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rq = q.len() / d;
    let mut out = vec![0.0; rq * d];
    let total: usize = segments
        .iter()
        .map(|s| heads * s.q_rows.len() * s.kv_rows.len())
        .sum();
    let mut probs = vec![0.0; total];
    let mut off = 0;
    for seg in segments {
        let nk = seg.kv_rows.len();
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in seg.q_rows.clone() {
                let p = &mut probs[off..off + nk];
                let qi = &q[i * d + cols.start..i * d + cols.end];
                for (jj, j) in seg.kv_rows.clone().enumerate() {
                    let masked = key_mask.is_some_and(|m| !m[j]);
                    p[jj] = if masked {
                        f64::NEG_INFINITY
                    } else {
                        dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale
                    };
                }
                softmax_slice(p);
                let oi = &mut out[i * d + cols.start..i * d + cols.end];
                for (jj, j) in seg.kv_rows.clone().enumerate() {
                    let w = keep.map_or(p[jj], |kp| p[jj] * kp[off + jj]);
                    if w != 0.0 {
                        let vj = &v[j * d + cols.start..j * d + cols.end];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
                off += nk;
            }
        }
    }
    (out, probs)
}

/// Projection weights for one multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionWeights {
    /// Identity projections with zero biases.
    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        AttentionWeights {
            wq: eye.clone(),
            bq: Tensor::zeros(&[1, d]),
            wk: eye.clone(),
            wv: eye.clone(),
            bv: Tensor::zeros(&[1, d]),
            wo: eye,
            bo: Tensor::zeros(&[1, d]),
        }
    }
}

pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    if w.rank() != 2 || w.shape()[0] != k {
        return Err(Error::shape(format!(
            "affine: input width {k} does not match weight {:?}",
            w.shape()
        )));
    }
    let m = w.shape()[1];
    let mut out = vec![0.0; n * m];
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::shape("affine bias width mismatch"));
        }
        for r in 0..n {
            out[r * m..(r + 1) * m].copy_from_slice(b.data());
        }
    }
    gemm(n, k, m, x.data(), false, w.data(), false, 1.0, &mut out);
    Tensor::matrix(n, m, out)
}

/// Multi-head attention with input/output projections.
///
/// `mask`, when present, marks which keys may be attended to.
pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    weights: &AttentionWeights,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let d = queries.cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "model dimension {d} not divisible by {n_heads} heads"
        )));
    }
    if keys.rows() == 0 || keys.is_empty() {
        return Err(Error::config("attention needs at least one key"));
    }
    if keys.rows() != values.rows() {
        return Err(Error::shape("key and value counts differ"));
    }
    if let Some(m) = mask {
        if m.len() != keys.rows() || !m.iter().any(|&b| b) {
            return Err(Error::argument("mask must cover every key and allow one"));
        }
    }
    let q = affine(queries, &weights.wq, Some(&weights.bq))?;
    let k = affine(keys, &weights.wk, None)?;
    let v = affine(values, &weights.wv, Some(&weights.bv))?;
    let seg = AttnSegment {
        q_rows: 0..q.rows(),
        kv_rows: 0..k.rows(),
    };
    let (ctx, _) = attention_forward(q.data(), k.data(), v.data(), d, n_heads, &[seg], mask, None);
    let ctx = Tensor::matrix(q.rows(), d, ctx)?;
    affine(&ctx, &weights.wo, Some(&weights.bo))
}
