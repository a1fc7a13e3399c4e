//! Central finite-difference verification of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Finite-difference step used by the verification suites.
pub const FD_STEP: f64 = 1e-6;

/// Gradient-check pass threshold.
pub const MAX_REL_ERROR: f64 = 1e-4;

/// Denominator floor of the relative error, so that gradients near zero are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

type Projection = (Graph<f64>, Vec<Var>, Var, Tensor<f64>);

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the analytic gradient of
/// `sum(r * build(inputs))` (with a fixed random projection `r`) and its
/// central finite difference, over every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], build: F, step: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<Projection> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        let shape = g.shape(y).to_vec();
        let r = match weights {
            Some(r) => r.clone(),
            None => Tensor::full(shape, 0.0),
        };
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv)?;
        let s = g.sum(prod);
        Ok((g, vars, s, r))
    };

    // Draw the projection once from the output shape.
    let (g0, _, _, r0) = project(inputs, None)?;
    drop(g0);
    let mut r = r0;
    for v in r.data_mut() {
        *v = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }

    let (g, vars, s, _) = project(inputs, Some(&r))?;
    let grads = g.backward(s);
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let (gp, _, sp, _) = project(&plus, Some(&r))?;
            let (gm, _, sm, _) = project(&minus, Some(&r))?;
            let numeric = (gp.value(sp).item() - gm.value(sm).item()) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
