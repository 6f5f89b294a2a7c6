//! AdamW: bias-corrected Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moments per parameter slot plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = (0..store.len()).map(|i| Tensor::zeros(store.get(i).shape())).collect();
        let v = (0..store.len()).map(|i| Tensor::zeros(store.get(i).shape())).collect();
        AdamState { m, v, step: 0 }
    }
}

/// One optimizer step. Slots without a gradient are treated as zero-gradient
/// (their moments decay and weight decay still applies, matching the usual
/// AdamW treatment of unused parameters).
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    hp: &AdamParams,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::shape("adam_step: gradient slot count mismatch"));
    }
    if !(lr >= 0.0) {
        return Err(Error::training(format!("adam_step: negative learning rate {lr}")));
    }
    for g in grads.iter().flatten() {
        if !g.is_finite() {
            return Err(Error::training("adam_step: non-finite gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for slot in 0..store.len() {
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let theta = store.get_mut(slot).data_mut();
        let zero = Tensor::zeros(&[theta.len()]);
        let g = grads[slot].as_ref().map_or(zero.data(), |t| t.data());
        for i in 0..theta.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
            theta[i] -= lr * hp.weight_decay * theta[i];
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate from `lr0` down to `lr_min` over `total`
/// steps (constant at `lr0` when `total` is 0).
pub fn cosine_lr(lr0: f64, lr_min: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let s = (step.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
}
