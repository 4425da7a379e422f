use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::is_decay_exempt;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) || !betas_ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// Same order as the parameter list.
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        OptimizerState {
            step: 0,
            moments: params
                .iter()
                .map(|(name, p)| Moments {
                    name: name.clone(),
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect(),
        }
    }
}

/// One AdamW update over every parameter that holds a gradient.
///
/// Decoupled decay `p ← p − lr·wd·p` runs before the Adam update; prompt
/// vectors skip it. Parameters without a gradient are left untouched.
pub fn adamw_step(params: &[(String, Tensor)], state: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    if state.moments.len() != params.len() {
        return Err(Error::Format(format!(
            "optimizer tracks {} parameters, model has {}",
            state.moments.len(),
            params.len()
        )));
    }
    for ((name, p), mo) in params.iter().zip(&state.moments) {
        if *name != mo.name || mo.m.len() != p.numel() {
            return Err(Error::shape("adamw_step", &[mo.m.len()], p.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((name, p), mo) in params.iter().zip(state.moments.iter_mut()) {
        let Some(g) = p.grad() else { continue };
        let decay = if is_decay_exempt(name) { 0.0 } else { cfg.lr * cfg.weight_decay };
        p.update_data(|data| {
            for i in 0..data.len() {
                data[i] -= decay * data[i];
                mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g[i];
                mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[(String, Tensor)]) -> Self {
        AdamW {
            config,
            state: OptimizerState::new(params),
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        adamw_step(params, &mut self.state, &self.config)
    }
}
