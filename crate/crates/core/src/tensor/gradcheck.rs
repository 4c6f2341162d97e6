//! Central finite-difference checks of tape gradients (64-bit only).

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step for central differences.
pub const STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradient of a scalar function of free leaves against
/// central differences and returns the worst relative error.
pub fn check_leaf_gradients<B>(inputs: &[Tensor<f64>], build: B) -> Result<f64>
where
    B: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(&[], false);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new(&[], false);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + STEP;
            let up = eval(&xs)?;
            xs[t].data_mut()[i] = orig - STEP;
            let down = eval(&xs)?;
            xs[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Worst relative error for one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub worst: f64,
}

/// Checks every element of every parameter in `params`.
///
/// `build` constructs the scalar loss on a graph over the given parameter
/// slice. `fault`, when set, scales the analytic gradients before the
/// comparison; it exists to demonstrate that a broken backward pass is
/// caught.
pub fn check_param_gradients<B>(
    params: &[Tensor<f64>],
    names: &[String],
    build: B,
    fault: Option<f64>,
) -> Result<Vec<GroupReport>>
where
    B: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(params, true);
        let loss = build(&mut g)?;
        g.backward(loss)?.into_param_grads()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(ps, false);
        let loss = build(&mut g)?;
        g.value(loss).item()
    };

    let mut ps = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate().take(params.len()) {
        let n = ps[p].numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = ps[p].data()[i];
            ps[p].data_mut()[i] = orig + STEP;
            let up = eval(&ps)?;
            ps[p].data_mut()[i] = orig - STEP;
            let down = eval(&ps)?;
            ps[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let mut a = analytic[p].as_ref().map_or(0.0, |g| g[i]);
            if let Some(f) = fault {
                a *= f;
            }
            worst = worst.max(rel_error(a, numeric));
        }
        reports.push(GroupReport {
            name: name.clone(),
            elements: n,
            worst,
        });
    }
    Ok(reports)
}
