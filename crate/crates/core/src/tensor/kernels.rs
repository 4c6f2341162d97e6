//! Dense row-major kernels shared by the eager tensor functions, the tape
//! and the incremental decoder.
//!
//! Each output element is accumulated in the same order regardless of how
//! many rows are computed at once, so a single-row evaluation reproduces the
//! corresponding row of a batched evaluation exactly.

use crate::parallel::{for_each_chunk, ExecMode};
use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm<F: Scalar>(mode: ExecMode, m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for_each_chunk(mode, m * k * n, c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &s) in a_row.iter().enumerate() {
            if s == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    });
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<F: Scalar>(mode: ExecMode, m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    for_each_chunk(mode, m * k * n, c, n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn<F: Scalar>(mode: ExecMode, m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 {
        return;
    }
    for_each_chunk(mode, m * k * n, c, n, |r, c_row| {
        for i in 0..m {
            let s = a[i * k + r];
            if s == F::zero() {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *cv += s * bv;
            }
        }
    });
}

/// Dot product with eight interleaved partial sums (a fixed order, so
/// results do not depend on the caller).
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ar.iter().zip(br) {
        acc += x * y;
    }
    acc
}

/// In-place numerically stabilised softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Layer norm over rows of width `d`. Writes the per-row mean and reciprocal
/// standard deviation when the buffers are provided.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows<F: Scalar>(
    x: &[F],
    d: usize,
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
    mut mean_out: Option<&mut [F]>,
    mut rstd_out: Option<&mut [F]>,
) {
    let inv_d = F::one() / F::of_f64(d as f64);
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        for (((o, &v), &g), &b) in or.iter_mut().zip(xr).zip(gain).zip(bias) {
            *o = (v - mean) * rstd * g + b;
        }
        if let Some(m) = mean_out.as_deref_mut() {
            m[r] = mean;
        }
        if let Some(s) = rstd_out.as_deref_mut() {
            s[r] = rstd;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Single-head masked attention for one block of queries and keys.
///
/// `q` is `[mq, stride]`, `k`/`v` are `[mk, stride]`; the head occupies
/// columns `col..col+dh`. `allowed` is the row-major `[mq, mk]` mask.
/// Probabilities are written to `probs` (`[mq, mk]`) and the weighted sum of
/// values is written into `out` columns `col..col+dh` (`out` has `stride`
/// columns).
#[allow(clippy::too_many_arguments)]
pub fn attend_head<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    stride: usize,
    col: usize,
    dh: usize,
    allowed: &[bool],
    probs: &mut [F],
    out: &mut [F],
) {
    let mq = q.len() / stride;
    let mk = k.len() / stride;
    let scale = F::one() / F::of_f64(dh as f64).sqrt();
    let masked = F::of_f64(crate::scalar::MASKED_LOGIT);
    for i in 0..mq {
        let qi = &q[i * stride + col..i * stride + col + dh];
        let prow = &mut probs[i * mk..(i + 1) * mk];
        for (j, p) in prow.iter_mut().enumerate() {
            let s = dot(qi, &k[j * stride + col..j * stride + col + dh]) * scale;
            *p = if allowed[i * mk + j] { s } else { s + masked };
        }
        softmax_in_place(prow);
        let orow = &mut out[i * stride + col..i * stride + col + dh];
        orow.iter_mut().for_each(|o| *o = F::zero());
        for (j, &p) in prow.iter().enumerate() {
            if p == F::zero() {
                continue;
            }
            for (o, &vv) in orow.iter_mut().zip(&v[j * stride + col..j * stride + col + dh]) {
                *o += p * vv;
            }
        }
    }
}
