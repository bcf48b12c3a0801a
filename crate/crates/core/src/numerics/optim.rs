use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);

/// Total number of optimizer steps taken by this process.
pub fn optimizer_steps_total() -> u64 {
    OPTIMIZER_STEPS.load(Ordering::SeqCst)
}

/// A named model tensor. Frozen parameters never track gradients and are
/// never touched by an optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, frozen: bool) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(!frozen),
            frozen,
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam without weight decay. Moment estimates are kept in `f64`
/// regardless of the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter carrying a gradient.
    pub fn step<'p, T: Scalar>(&mut self, params: impl IntoIterator<Item = &'p mut Parameter<T>>, lr: f64) {
        self.step += 1;
        OPTIMIZER_STEPS.fetch_add(1, Ordering::SeqCst);
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for p in params {
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let g = grad[i].to_f64().unwrap_or(f64::NAN);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + eps);
                *w = T::lit(w.to_f64().unwrap_or(f64::NAN) - update);
            }
        }
    }
}
