//! AdamW with decoupled weight decay and linear learning-rate warm-up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{name}` has shape {param:?} but its gradient has shape {grad:?}")]
    GradShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
            warmup_steps: 20,
        }
    }
}

impl AdamWConfig {
    /// Learning rate applied on update number `step` (1-based).
    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers for parameter `i`.
    pub fn moments(&self, i: usize) -> (&[T], &[T]) {
        (&self.first[i], &self.second[i])
    }

    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<Tensor<T>>],
        names: &[String],
    ) -> Result<(), OptimError> {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        for (i, p) in params.iter().enumerate() {
            match grads.get(i).and_then(Option::as_ref) {
                None => return Err(OptimError::MissingGrad(name(i))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(OptimError::GradShape {
                        name: name(i),
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = T::lit(c.effective_lr(self.step));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above").data();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(0.0);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
