use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{contract_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape()))
            .collect();
        OptimizerState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

/// One decoupled-weight-decay Adam update:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(params: &mut ParamStore, grads: &Grads, state: &mut OptimizerState) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(contract_err!("learning rate must be > 0, got {}", cfg.lr));
    }
    if state.m.len() != params.len() {
        return Err(contract_err!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        ));
    }
    for id in params.ids() {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape(format!(
                "gradient for {} has shape {:?}",
                params.name(id),
                g.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericAbort(format!(
                "gradient of {} is {} at element {i} (step {})",
                params.name(id),
                g.data()[i],
                state.step + 1
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for id in params.ids() {
        let i = id.0;
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
