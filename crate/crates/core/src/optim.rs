//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for one parameter store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// Applies one Adam update. `lr_scale[i]` multiplies the learning rate of
/// parameter `i` (pass `None` for a uniform rate).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    let cfg = state.config;
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::invalid(format!("learning rate {} is not usable", cfg.lr)));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("adam: parameter/gradient count mismatch"));
    }
    if lr_scale.is_some_and(|s| s.len() != params.len()) {
        return Err(Error::invalid("adam: lr_scale length mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = &grads[i];
        let tensor = params.get_mut(id);
        if g.len() != tensor.numel() {
            return Err(Error::shape("adam_step", format!("gradient {i} has wrong length")));
        }
        let lr = cfg.lr * lr_scale.map_or(1.0, |s| s[i]);
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (((p, &gj), mj), vj) in tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
