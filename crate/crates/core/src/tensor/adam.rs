use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TensorMap;
use crate::error::{Error, Result};

/// Adam hyperparameters. The default is the usual DCGAN setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid Adam config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without an entry in `grads` are left alone.
pub fn adam_step(params: &mut TensorMap, grads: &TensorMap, state: &mut AdamState) -> Result<()> {
    state.config.validate()?;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::State(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(mo) = state.moments.get(name) {
            if mo.m.len() != p.len() {
                return Err(Error::State(format!(
                    "moment buffers for `{name}` hold {} values, parameter has {}",
                    mo.m.len(),
                    p.len()
                )));
            }
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        for (((w, &gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mo.m.iter_mut())
            .zip(mo.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
