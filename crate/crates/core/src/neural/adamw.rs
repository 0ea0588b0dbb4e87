//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
/// Non-finite gradients abort the step without touching anything.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, opt: &AdamW) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Optimizer(format!(
            "shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite gradient at parameter {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= opt.lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * params[i]);
    }
    Ok(())
}
