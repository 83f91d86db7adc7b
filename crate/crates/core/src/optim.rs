//! Adam with bias-corrected moments, tracked per named parameter buffer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, group: &str) -> Option<&AdamState> {
        self.states.get(group)
    }

    /// One update of `params` from `grads`. A disabled group is left alone,
    /// values and moments both.
    pub fn step(
        &mut self,
        group: &str,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        enabled: bool,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "group `{group}`: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if !enabled {
            return Ok(());
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                group: group.to_string(),
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let state = self.states.entry(group.to_string()).or_default();
        if state.m.len() != params.len() {
            state.m = vec![0.0; params.len()];
            state.v = vec![0.0; params.len()];
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
