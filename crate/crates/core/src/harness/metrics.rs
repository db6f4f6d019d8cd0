//! Test-set metrics: accuracy, angular error and RI invariance.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::model::ModelSpec;
use super::train::{count_correct, Batch, EpochRecord};
use crate::error::{Result, RfnError};
use crate::losses::{invariance_distance, LossConfig};
use crate::numcore::{Graph, ParamStore, Tensor};
use crate::synthdata::{Dataset, ShapeSample};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of correctly classified test samples.
    pub accuracy: f64,
    /// Mean absolute angular error of the orientation head, radians.
    pub angular_mae: f64,
    /// Mean invariance distance between `RI(X)` and `RI(rot90(X))`, where
    /// `X` is the block input; in `[0, 2]`.
    pub invariance_score: f64,
    pub param_total: usize,
    /// Training wall time; evaluation alone leaves it at zero.
    pub wall_time_s: f64,
    pub history: Vec<EpochRecord>,
}

/// Absolute difference of two angles, wrapped into `[0, π]`.
pub fn angular_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

fn row_distance(a: &[f32], b: &[f32], sigma: f64) -> Result<f64> {
    let zero = |r: &[f32]| r.iter().all(|&v| v == 0.0);
    if zero(a) && zero(b) {
        return Ok(0.0);
    }
    let ta = Tensor::new(&[a.len()], a.to_vec())?;
    let tb = Tensor::new(&[b.len()], b.to_vec())?;
    invariance_distance(&ta, &tb, sigma)
}

/// Evaluates `params` on `dataset` without modifying anything. The
/// invariance score uses the fixed bandwidth `loss.sigma`.
pub fn evaluate(spec: &ModelSpec, params: &ParamStore<f32>, dataset: &Dataset, loss: &LossConfig) -> Result<MetricsReport> {
    spec.check_params(params)?;
    if dataset.is_empty() {
        return Err(RfnError::invalid("evaluation set is empty"));
    }
    if dataset.image_size != spec.image_size {
        return Err(RfnError::invalid(format!(
            "dataset images are {0}×{0}, model expects {1}×{1}",
            dataset.image_size, spec.image_size
        )));
    }
    let mut correct = 0;
    let mut angle_err = 0.0;
    let mut invariance = 0.0;
    for chunk in dataset.samples.chunks(EVAL_BATCH) {
        if let Some(bad) = chunk.iter().find(|s| s.class_id >= spec.classes) {
            return Err(RfnError::invalid(format!(
                "sample class {} exceeds the model's {} classes",
                bad.class_id, spec.classes
            )));
        }
        let refs: Vec<&ShapeSample> = chunk.iter().collect();
        let batch = Batch::<f32>::from_samples(&refs)?;
        let mut g = Graph::<f32>::new();
        let vars = spec.bind(&mut g, params, false);
        let images = g.constant(batch.images.clone());
        let out = spec.forward(&mut g, &vars, images)?;
        correct += count_correct(g.value(out.logits), &batch.labels);
        for (row, s) in g.value(out.orientation).data().chunks(2).zip(chunk) {
            let predicted = (row[0] as f64).atan2(row[1] as f64);
            angle_err += angular_error(predicted, s.orientation as f64);
        }
        let turned = g.rotate_channels(out.features, spec.quarter_turn())?;
        let ri_turned = spec.ri(&mut g, &vars, turned)?;
        let (a, b) = (g.value(out.ri), g.value(ri_turned));
        let dim = a.len() / chunk.len();
        for (ra, rb) in a.data().chunks(dim).zip(b.data().chunks(dim)) {
            invariance += row_distance(ra, rb, loss.sigma)?;
        }
    }
    let n = dataset.len() as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / n,
        angular_mae: angle_err / n,
        invariance_score: invariance / n,
        param_total: spec.param_total(),
        wall_time_s: 0.0,
        history: Vec::new(),
    })
}
