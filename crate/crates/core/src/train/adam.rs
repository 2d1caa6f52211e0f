use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::{Result, Tensor, TensorError};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one pair per parameter in [`ParamSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Validation(format!(
                "adam: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((id, _, p), g) in params.iter().zip(grads) {
            let i = id.index();
            for other in [g, &self.m[i], &self.v[i]] {
                if other.shape() != p.shape() {
                    return Err(TensorError::Dimension {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: other.shape().to_vec(),
                    });
                }
            }
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (p, g) = (params.get(id).data(), grads[i].data());
            let (m0, v0) = (self.m[i].data(), self.v[i].data());
            let n = p.len();
            let (mut m, mut v, mut out) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for k in 0..n {
                let mk = b1 * m0[k] + (1.0 - b1) * g[k];
                let vk = b2 * v0[k] + (1.0 - b2) * g[k] * g[k];
                out.push(p[k] - lr * (mk / c1) / ((vk / c2).sqrt() + eps));
                m.push(mk);
                v.push(vk);
            }
            let shape = params.get(id).shape().to_vec();
            self.m[i] = Tensor::new(&shape, m)?;
            self.v[i] = Tensor::new(&shape, v)?;
            params.set(id, Tensor::new(&shape, out)?)?;
        }
        Ok(())
    }
}
