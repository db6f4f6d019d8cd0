use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::rng::Rng;

/// Truncation point in standard deviations.
pub const TRUNCATION: f64 = 2.0;

/// How a weight tensor's standard deviation is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum InitScale {
    /// Fixed standard deviation.
    Fixed(f64),
    /// `sqrt(2 / fan_in)`.
    He,
}

impl InitScale {
    pub fn std(&self, fan_in: usize) -> f64 {
        match *self {
            InitScale::Fixed(s) => s,
            InitScale::He => (2.0 / fan_in.max(1) as f64).sqrt(),
        }
    }
}

/// Mean-zero normal samples rejected outside `±2·std`.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.truncated_normal(std, TRUNCATION) as f32)
}
