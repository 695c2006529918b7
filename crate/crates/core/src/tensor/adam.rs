use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam without weight decay. Moments are created lazily, zero-filled, on the
/// first step that sees a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one bias-corrected update. `params` and `grads` must carry the
    /// same names and shapes.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.keys().zip(grads.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = params.keys().filter(|k| !grads.contains_key(*k)).collect();
            let extra: Vec<_> = grads.keys().filter(|k| !params.contains_key(*k)).collect();
            return Err(Error::Logic(format!(
                "adam key mismatch: no gradient for {missing:?}, unknown gradients {extra:?}"
            )));
        }
        for (name, p) in params.iter() {
            if p.shape() != grads[name].shape() {
                return Err(Error::Logic(format!(
                    "adam: gradient for `{name}` has shape {:?}, parameter {:?}",
                    grads[name].shape(),
                    p.shape()
                )));
            }
            if let Some(mo) = self.moments.get(name) {
                if mo.m.shape() != p.shape() {
                    return Err(Error::Logic(format!("adam: moment shape drift for `{name}`")));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.data_mut().iter_mut().zip(mo.v.data_mut()));
            for ((w, &g), (m, v)) in iter {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
