use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Float>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam over every tensor of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    states: Vec<AdamState<T>>,
    calls: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let states = store.ids().map(|id| AdamState::new(store.get(id).len())).collect();
        Adam { cfg, states, calls: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of `step` calls so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn state(&self, id: ParamId) -> &AdamState<T> {
        &self.states[id.0]
    }

    pub fn state_mut(&mut self, id: ParamId) -> &mut AdamState<T> {
        &mut self.states[id.0]
    }

    /// Applies one update to each parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            adam_step(p.data_mut(), g.data(), &mut self.states[id.0], &self.cfg);
        }
        self.calls += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig { lr: 0.01, eps: 1e-12, ..Default::default() };
        let mut p = vec![0.0f64, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.5, -0.02], &mut s, &cfg);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }
}
