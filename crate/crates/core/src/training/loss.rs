use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean label-smoothed negative log-likelihood over the non-`pad` targets.
///
/// `logits` is `[B × m × V]` and `targets` is `B` rows of `m` ids. The
/// smoothed target distribution puts `1 - ε + ε/V` on the gold id and
/// `ε/V` elsewhere. Evaluated in 64-bit.
pub fn cross_entropy_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[Vec<u32>],
    pad_id: u32,
    smoothing: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != targets.len() || targets.iter().any(|t| t.len() != shape[1]) {
        return Err(Error::Shape(format!(
            "logits {shape:?} do not match {} target rows",
            targets.len()
        )));
    }
    let v = shape[2];
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, row) in targets.iter().enumerate() {
        for (i, &t) in row.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            if t as usize >= v {
                return Err(Error::Index(format!("target id {t} outside vocabulary of size {v}")));
            }
            let x = logits.row(b * shape[1] + i);
            let max = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = x.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            let uniform = smoothing / v as f64;
            for (c, &z) in x.iter().enumerate() {
                let q = if c == t as usize { 1.0 - smoothing + uniform } else { uniform };
                total -= q * (z.as_f64() - lse);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("every target position is padding".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::<f64>::zeros(&[2, 3, 5]);
        let targets = vec![vec![1, 2, 0], vec![4, 0, 0]];
        let loss = cross_entropy_loss(&logits, &targets, 0, 0.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_with_the_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let logits = Tensor::new(vec![1, 1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let loss = cross_entropy_loss(&logits, &[vec![0]], 9, 0.0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn smoothed_value_matches_high_precision_reference() {
        // mpmath, 50 digits: -(0.9 + 0.1/3)*log_softmax_0 - 2*(0.1/3)*log_softmax_1
        // with logits [1, 0, 0].
        let reference = 0.618_111_380_598_717_8;
        let logits = Tensor::new(vec![1, 1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
        let loss = cross_entropy_loss(&logits, &[vec![0]], 9, 0.1).unwrap();
        assert!((loss - reference).abs() < 1e-14, "{loss}");
    }

    #[test]
    fn all_padding_is_a_contract_error() {
        let logits = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(matches!(
            cross_entropy_loss(&logits, &[vec![0, 0]], 0, 0.1),
            Err(Error::Contract(_))
        ));
    }
}
