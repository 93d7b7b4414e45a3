use indexmap::IndexMap;

use super::tensor::ParameterSet;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_params(params: &ParameterSet) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| (name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        AdamState { step: 0, moments }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Gradients are read, never cleared.
pub fn optimizer_step(params: &mut ParameterSet, state: &mut AdamState, lr: f32, cfg: AdamConfig) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGradient(name.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                left: tensor.shape().to_vec(),
                right: vec![m.len()],
            });
        }
        let grad = tensor.grad().expect("checked above").to_vec();
        let values = tensor.values_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
