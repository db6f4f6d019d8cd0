//! Finite-difference check of the whole model and total loss in 64-bit.

use indexmap::IndexMap;

use super::model::ModelSpec;
use super::train::{batch_objective, ri_angles, Batch};
use crate::config::RunConfig;
use crate::error::{Result, RfnError};
use crate::numcore::{grad_check, GradCheckConfig, GradCheckReport, Graph, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::{gen_dataset, ShapeSample, Split};

const BIAS_STREAM: u64 = 0xB1A5;

/// Checks `d total / d θ` for every parameter of the configured model on
/// the first `samples` training samples, at the seeded initialization with
/// biases redrawn from `±[0.05, 0.1]`: zero biases put a relu input exactly
/// on its kink wherever a receptive field is all zero.
pub fn model_grad_check(config: &RunConfig, samples: usize, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(RfnError::invalid("gradient check needs at least one sample"));
    }
    let spec = config.model_spec()?;
    let mut data_spec = config.data.spec(Split::Train);
    data_spec.size = samples.max(data_spec.classes);
    let data = gen_dataset(&data_spec)?;
    let refs: Vec<&ShapeSample> = data.samples.iter().take(samples).collect();
    let params = spec.init_params(&mut Rng::stream(config.seed, super::train::INIT_STREAM));
    let mut bias_rng = Rng::stream(config.seed, BIAS_STREAM);
    let inputs: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|(n, t)| {
            let t: Tensor<f64> = t.cast();
            if n.ends_with(".bias") {
                let t = Tensor::from_fn(t.shape(), |_| {
                    let v = bias_rng.uniform(0.05, 0.1);
                    if bias_rng.next_u64() & 1 == 0 {
                        v
                    } else {
                        -v
                    }
                });
                (n.clone(), t)
            } else {
                (n.clone(), t)
            }
        })
        .collect();
    let batch = Batch::<f64>::from_samples(&refs)?;
    let angles = ri_angles(spec.rfn.n, config.train.ri_angles, &mut Rng::stream(config.seed, 0));
    check_objective(&spec, config, &batch, &angles, &inputs, gc)
}

fn check_objective(
    spec: &ModelSpec,
    config: &RunConfig,
    batch: &Batch<f64>,
    angles: &[usize],
    inputs: &[(String, Tensor<f64>)],
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let objective = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let map: IndexMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        Ok(batch_objective(spec, g, &map, batch, &config.loss, &config.train, angles)?.total)
    };
    grad_check(&objective, inputs, gc)
}
