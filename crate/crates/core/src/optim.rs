//! Adam with linear warmup to a constant learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{ParamStore, Tensor};
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate used for the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: BTreeMap<String, Moments>,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        if !(c.lr >= 0.0
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.eps > 0.0)
        {
            return Err(invalid!("invalid Adam settings {c:?}"));
        }
        Ok(Self {
            config,
            state: BTreeMap::new(),
            step: 0,
        })
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient are not touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient for {name} has shape {:?}, param {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if let Some(i) = g.has_non_finite() {
                return Err(crate::Error::NonFinite { index: i });
            }
            let n = p.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                let m = c.beta1 * st.m[i] as f64 + (1.0 - c.beta1) * gi;
                let v = c.beta2 * st.v[i] as f64 + (1.0 - c.beta2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let upd = lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}
