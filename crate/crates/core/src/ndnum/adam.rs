//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{MlpGrads, MlpNet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers mirroring one network's parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl AdamState {
    pub fn new(net: &MlpNet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort the step before any
    /// parameter or moment is touched.
    pub fn step(&mut self, net: &mut MlpNet, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != self.m.layers.len() {
            return Err(Error::shape("gradient layer count", self.m.layers.len(), grads.layers.len()));
        }
        for (k, (g, m)) in grads.layers.iter().zip(&self.m.layers).enumerate() {
            if g.w.shape() != m.w.shape() {
                return Err(Error::shape(
                    format!("layer {k} weight gradient size"),
                    m.w.data().len(),
                    g.w.data().len(),
                ));
            }
            if g.b.len() != m.b.len() {
                return Err(Error::shape(format!("layer {k} bias gradient"), m.b.len(), g.b.len()));
            }
            if !g.w.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in layer {k} weight")));
            }
            if g.b.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in layer {k} bias")));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            for (((p, &g), m), v) in layer
                .w
                .data_mut()
                .iter_mut()
                .zip(g.w.data())
                .zip(m.w.data_mut())
                .zip(v.w.data_mut())
            {
                update(p, g, m, v);
            }
            for (((p, &g), m), v) in layer.b.iter_mut().zip(&g.b).zip(&mut m.b).zip(&mut v.b) {
                update(p, g, m, v);
            }
        }
        Ok(())
    }
}
