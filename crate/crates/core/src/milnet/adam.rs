use serde::{Deserialize, Serialize};

use super::MilError;
use crate::autodiff::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from each tensor's accumulated gradient.
/// Tensors without a gradient buffer are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    learning_rate: f64,
    config: &AdamConfig,
) -> Result<(), MilError> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(MilError::NonFiniteGradient {
                    param: name.to_string(),
                    index: k,
                });
            }
        }
    }
    state.step += 1;
    let bc1 = 1.0 - config.beta1.powi(state.step as i32);
    let bc2 = 1.0 - config.beta2.powi(state.step as i32);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in t.data_mut().iter_mut().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= learning_rate * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok(())
}
