//! Scaled dot-product and multi-head attention, plus the causal, padding
//! and pseudo-bidirectional mask builders.

mod mask;

pub use mask::{
    build_causal_mask, build_padding_mask, build_pbd_mask, source_padding_keys, AttentionMask,
};

use crate::error::{Error, Result};
use crate::parallel::ExecMode;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Projection weights of one multi-head attention module. All four are
/// `[d_model × d_model]` and act on row vectors (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams<F> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub heads: usize,
}

impl<F: Scalar> MultiHeadParams<F> {
    pub fn d_model(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d, d] {
                return Err(Error::Shape(format!(
                    "projection of shape {:?} should be [{d}, {d}]",
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / √d + M) V` for one head.
pub fn scaled_dot_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: &AttentionMask,
) -> Result<Tensor<F>> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?} are incompatible",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::Shape(format!(
            "mask is {}x{} but attention is {}x{}",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    mask.validate()?;
    let mut probs = vec![F::zero(); q.rows() * k.rows()];
    let mut out = vec![F::zero(); q.rows() * d];
    kernels::attend_head(q.data(), k.data(), v.data(), d, 0, d, mask.allowed(), &mut probs, &mut out);
    Tensor::new(vec![q.rows(), d], out)
}

/// Multi-head attention of `x_q` over the row-concatenation of `x_kv`.
///
/// For pseudo-bidirectional decoding `x_kv` is `[encoder states, decoder
/// states]`; the mask then has the `[source ‖ target]` key layout.
pub fn multi_head_attention<F: Scalar>(
    x_q: &Tensor<F>,
    x_kv: &[&Tensor<F>],
    params: &MultiHeadParams<F>,
    mask: &AttentionMask,
) -> Result<Tensor<F>> {
    params.validate()?;
    let d = params.d_model();
    let mut kv_data = Vec::new();
    for part in x_kv {
        if part.cols() != d {
            return Err(Error::Shape(format!(
                "key/value input {:?} does not have width {d}",
                part.shape()
            )));
        }
        kv_data.extend_from_slice(part.data());
    }
    let kv = Tensor::new(vec![kv_data.len() / d, d], kv_data)?;
    if mask.rows() != x_q.rows() || mask.cols() != kv.rows() {
        return Err(Error::Shape(format!(
            "mask is {}x{} but attention is {}x{}",
            mask.rows(),
            mask.cols(),
            x_q.rows(),
            kv.rows()
        )));
    }
    mask.validate()?;
    let mode = ExecMode::default();
    let q = x_q.matmul_with(mode, &params.w_q)?;
    let k = kv.matmul_with(mode, &params.w_k)?;
    let v = kv.matmul_with(mode, &params.w_v)?;
    let dh = d / params.heads;
    let mut probs = vec![F::zero(); q.rows() * k.rows()];
    let mut heads = vec![F::zero(); q.rows() * d];
    for h in 0..params.heads {
        kernels::attend_head(
            q.data(),
            k.data(),
            v.data(),
            d,
            h * dh,
            dh,
            mask.allowed(),
            &mut probs,
            &mut heads,
        );
    }
    Tensor::new(vec![q.rows(), d], heads)?.matmul_with(mode, &params.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct per-row evaluation of masked softmax attention.
    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &AttentionMask) -> Vec<f64> {
        let d = q.cols();
        let mut out = Vec::new();
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    let s: f64 = (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (d as f64).sqrt();
                    if mask.get(i, j) { s } else { s - 1e9 }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..d {
                out.push((0..k.rows()).map(|j| (scores[j] - max).exp() / z * v.row(j)[c]).sum());
            }
        }
        out
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = rand_t(&[3, 4], 1);
        let k = rand_t(&[1, 4], 2);
        let v = rand_t(&[1, 4], 3);
        let out = scaled_dot_attention(&q, &k, &v, &AttentionMask::full(3, 1)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn orthogonal_queries_average_values() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = rand_t(&[4, 3], 4);
        let v = rand_t(&[4, 3], 5);
        let out = scaled_dot_attention(&q, &k, &v, &AttentionMask::full(2, 4)).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|j| v.row(j)[c]).sum::<f64>() / 4.0;
            assert!((out.row(0)[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_loop() {
        let q = rand_t(&[2, 5], 6);
        let k = rand_t(&[3, 5], 7);
        let v = rand_t(&[3, 5], 8);
        let mask = AttentionMask::new(2, 3, vec![true, false, true, true, true, false]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        let want = naive_attention(&q, &k, &v, &mask);
        let diff = out.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn fully_masked_row_is_a_contract_error() {
        let q = rand_t(&[2, 2], 1);
        let mask = AttentionMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            scaled_dot_attention(&q, &q, &q, &mask),
            Err(Error::Contract(_))
        ));
    }

    fn params(d: usize, heads: usize, seed: u64) -> MultiHeadParams<f64> {
        MultiHeadParams {
            w_q: rand_t(&[d, d], seed),
            w_k: rand_t(&[d, d], seed + 1),
            w_v: rand_t(&[d, d], seed + 2),
            w_o: rand_t(&[d, d], seed + 3),
            heads,
        }
    }

    #[test]
    fn one_head_equals_projected_single_attention() {
        let p = params(4, 1, 10);
        let x = rand_t(&[3, 4], 20);
        let kv = rand_t(&[5, 4], 21);
        let mask = build_pbd_mask(2, 3).unwrap();
        let got = multi_head_attention(&x, &[&kv.clone()], &p, &mask).unwrap();
        let q = x.matmul(&p.w_q).unwrap();
        let k = kv.matmul(&p.w_k).unwrap();
        let v = kv.matmul(&p.w_v).unwrap();
        let want = scaled_dot_attention(&q, &k, &v, &mask).unwrap().matmul(&p.w_o).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn two_heads_with_identity_output_concatenate_heads() {
        let d = 4;
        let mut p = params(d, 2, 30);
        p.w_o = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let x = rand_t(&[2, d], 40);
        let kv = rand_t(&[3, d], 41);
        let mask = AttentionMask::new(2, 3, vec![true, true, false, true, true, true]).unwrap();
        let got = multi_head_attention(&x, &[&kv], &p, &mask).unwrap();
        let q = x.matmul(&p.w_q).unwrap();
        let k = kv.matmul(&p.w_k).unwrap();
        let v = kv.matmul(&p.w_v).unwrap();
        let cols = |t: &Tensor<f64>, lo: usize| {
            Tensor::new(
                vec![t.rows(), 2],
                (0..t.rows()).flat_map(|r| t.row(r)[lo..lo + 2].to_vec()).collect(),
            )
            .unwrap()
        };
        for (h, lo) in [0usize, 2].into_iter().enumerate() {
            let want = naive_attention(&cols(&q, lo), &cols(&k, lo), &cols(&v, lo), &mask);
            for r in 0..2 {
                for c in 0..2 {
                    assert!((got.row(r)[lo + c] - want[r * 2 + c]).abs() < 1e-6, "head {h}");
                }
            }
        }
    }

    #[test]
    fn key_permutation_invariance() {
        let p = params(4, 2, 50);
        let x = rand_t(&[3, 4], 60);
        let kv = rand_t(&[5, 4], 61);
        let mask = build_pbd_mask(2, 3).unwrap();
        let base = multi_head_attention(&x, &[&kv], &p, &mask).unwrap();
        let perm = [3, 0, 4, 2, 1];
        let kv_p = Tensor::new(vec![5, 4], perm.iter().flat_map(|&j| kv.row(j).to_vec()).collect()).unwrap();
        let permuted = multi_head_attention(&x, &[&kv_p], &p, &mask.permute_keys(&perm)).unwrap();
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let p = params(4, 3, 70);
        let x = rand_t(&[1, 4], 0);
        assert!(matches!(
            multi_head_attention(&x, &[&x], &p, &AttentionMask::full(1, 1)),
            Err(Error::Config(_))
        ));
    }
}
