use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Result, RfnError};

/// Named parameter tensors in a fixed (insertion) order.
pub type ParamStore<T = f32> = IndexMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct OptState<T: Real = f32> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(config: &SgdConfig) -> Self {
        Self {
            learning_rate: T::lit(config.learning_rate),
            momentum: T::lit(config.momentum),
            weight_decay: T::lit(config.weight_decay),
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Updates every parameter that has an entry in `grads`; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| RfnError::invalid(format!("gradient for unknown parameter {name}")))?;
            param.ensure_shape("sgd_step", grad.shape())?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            v.ensure_shape("sgd_step", grad.shape())?;
            for ((p, vel), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vel = self.momentum * *vel + g + self.weight_decay * *p;
                *p -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
