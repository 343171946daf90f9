use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// Bias-corrected adaptive-moment update of every non-frozen parameter.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) {
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let step_size = T::of(c.lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_frozen(id) {
            continue;
        }
        let grad = store.grad(id).clone();
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        let p = store.value_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = grad.data()[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
}
