use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// Adam over a fixed parameter set.
///
/// Parameters outside the set, frozen ones, and ones without a gradient are
/// left untouched, including their moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    params: Vec<ParamId>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<ParamId>) -> Self {
        Adam {
            config,
            state: AdamState::default(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        adam_step(store, &self.params, &mut self.state, &self.config)
    }
}

/// One bias-corrected Adam update. Gradients are checked for NaN before any
/// parameter is modified.
pub fn adam_step(
    store: &mut ParamStore,
    params: &[ParamId],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("lr must be positive, got {}", cfg.lr)));
    }
    for &id in params {
        let p = store.get(id);
        if let Some(g) = &p.grad {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", format!("grad shape for {}", p.name)));
            }
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NanGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for &id in params {
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
