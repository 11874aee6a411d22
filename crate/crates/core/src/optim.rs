//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Element;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("optimizer state has {state} slots but {given} parameters were given")]
    Arity { state: usize, given: usize },
    #[error("parameter {index} has {param} values but its gradient has {grad}")]
    Length { index: usize, param: usize, grad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T: Element> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Decay scales the weights directly:
    /// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::LearningRate(lr));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::Arity {
                state: self.m.len(),
                given: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(OptimError::Length {
                    index: i,
                    param: p.len(),
                    grad: g.len(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::cast(c.beta1);
        let b2 = T::cast(c.beta2);
        let bc1 = T::cast(1.0 - c.beta1.powi(t));
        let bc2 = T::cast(1.0 - c.beta2.powi(t));
        let lr_t = T::cast(lr);
        let decay = T::cast(1.0 - lr * c.weight_decay);
        let eps = T::cast(c.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
