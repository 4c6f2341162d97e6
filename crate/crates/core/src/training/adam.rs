use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &[Tensor<F>], config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }

    pub fn matches(&self, params: &[Tensor<F>]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
///
/// `grads[i]` is `None` for a parameter that received no gradient; it is
/// treated as zero. Every gradient is checked before anything is updated,
/// so a non-finite value leaves parameters and state untouched.
pub fn adam_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &[Option<Vec<F>>],
    names: &[String],
    state: &mut OptimState<F>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].numel() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    names[i],
                    g.len(),
                    params[i].numel()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    param: names[i].clone(),
                });
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (F::of_f64(beta1), F::of_f64(beta2));
    let (one_b1, one_b2) = (F::of_f64(1.0 - beta1), F::of_f64(1.0 - beta2));
    let (c1, c2) = (F::of_f64(c1), F::of_f64(c2));
    let (lr, eps) = (F::of_f64(lr), F::of_f64(eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_deref();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(F::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
