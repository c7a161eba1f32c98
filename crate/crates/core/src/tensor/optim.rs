use serde::{Deserialize, Serialize};

use super::graph::ParamGrads;
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias-corrected moments over a fixed set of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Optimizer over every parameter in the store.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self::for_params(store, store.ids().collect(), config)
    }

    /// Optimizer over a subset; other parameters stay frozen.
    pub fn for_params(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let first = params
            .iter()
            .map(|&p| Tensor::zeros(store.get(p).shape()))
            .collect();
        let second = params
            .iter()
            .map(|&p| Tensor::zeros(store.get(p).shape()))
            .collect();
        AdamState {
            config,
            step: 0,
            params,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, p: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .position(|&q| q == p)
            .map(|i| &self.first[i])
    }

    /// One Adam update. Every managed parameter must have a finite gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for &p in &self.params {
            let g = grads.get(p).ok_or_else(|| {
                Error::Usage(format!("no gradient for parameter `{}`", store.name(p)))
            })?;
            if g.shape() != store.get(p).shape() {
                return Err(Error::Shape {
                    node: p.0,
                    op: "adam",
                    detail: format!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        store.name(p),
                        store.get(p).shape()
                    ),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(p).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, &p) in self.params.iter().enumerate() {
            let g = grads.get(p).expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.get_mut(p).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                w[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
