//! Adam optimizer with per-parameter moment slots keyed by name.

use super::array::Array;
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// First/second moment estimates for each parameter plus the shared step
/// counter. The counter increases exactly once per `step` call.
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Array, Array)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over a full named parameter/gradient pairing.
    pub fn step<'a, S: AsRef<str>>(
        &mut self,
        params: impl IntoIterator<Item = (S, &'a mut Array)>,
        grads: &HashMap<String, Array>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (name, param) in params {
            let name = name.as_ref();
            let Some(grad) = grads.get(name) else {
                continue; // parameter untouched by this loss
            };
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Array::zeros(param.shape()), Array::zeros(param.shape())));
            if m.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: m.shape().to_vec(),
                    rhs: param.shape().to_vec(),
                });
            }
            for i in 0..param.len() {
                let g = grad.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                param.data_mut()[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
