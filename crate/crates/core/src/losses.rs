//! Rotation-invariance loss, task losses and their weighted total.
//!
//! The invariance term compares L2-normalized RI maps through a Gaussian RBF
//! kernel `k(a, b) = exp(−‖a − b‖² / 2σ²)`. By default each pair contributes
//! the kernel-induced squared distance `2·(1 − k)`, which vanishes when the
//! maps agree; [`KernelForm::Similarity`] uses `k` itself.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::numcore::graph::normalize_rows;
use crate::numcore::{kernels, Graph, KernelForm, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Use `LossConfig::sigma` as given.
    Fixed,
    /// Median pairwise distance of the batch's normalized RI maps.
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sigma: f64,
    pub sigma_mode: SigmaMode,
    pub lambda_reg: f64,
    pub lambda_ri: f64,
    pub kernel_form: KernelForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            sigma_mode: SigmaMode::Fixed,
            lambda_reg: 0.2,
            lambda_ri: 0.5,
            kernel_form: KernelForm::Distance,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(RfnError::invalid(format!("loss.sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda_reg >= 0.0) || !(self.lambda_ri >= 0.0) {
            return Err(RfnError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub ri: f64,
    pub total: f64,
}

/// Value of an invariance loss; `degenerate` is set when there were no
/// rotated copies to compare against (a single angle).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiLoss {
    pub value: f64,
    pub degenerate: bool,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(RfnError::invalid(format!("RBF bandwidth must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn rbf_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RfnError::shape("rbf_kernel", &[a.len()], &[b.len()]));
    }
    check_sigma(sigma)?;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// Per-pair term between two maps after flattening and L2 normalization.
pub fn invariance_term<T: Real>(y0: &Tensor<T>, yr: &Tensor<T>, sigma: f64, form: KernelForm) -> Result<f64> {
    if y0.shape() != yr.shape() {
        return Err(RfnError::shape("invariance_distance", y0.shape(), yr.shape()));
    }
    check_sigma(sigma)?;
    let a: Vec<f64> = y0.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = yr.data().iter().map(|v| v.as_f64()).collect();
    let (ah, _) = normalize_rows(&a, 1, a.len())?;
    let (bh, _) = normalize_rows(&b, 1, b.len())?;
    let k = rbf_kernel(&ah, &bh, sigma)?;
    Ok(match form {
        KernelForm::Distance => 2.0 * (1.0 - k),
        KernelForm::Similarity => k,
    })
}

/// `2·(1 − k(ŷ0, ŷr))`; zero iff the normalized maps coincide, at most 2.
pub fn invariance_distance<T: Real>(y0: &Tensor<T>, yr: &Tensor<T>, sigma: f64) -> Result<f64> {
    invariance_term(y0, yr, sigma, KernelForm::Distance)
}

fn check_batches<T: Real>(ri: &[Tensor<T>], rotated: &[Vec<Tensor<T>>]) -> Result<Option<usize>> {
    if ri.is_empty() {
        return Err(RfnError::invalid("invariance loss needs a nonempty batch"));
    }
    if ri.len() != rotated.len() {
        return Err(RfnError::shape("invariance loss", &[ri.len()], &[rotated.len()]));
    }
    let copies = rotated[0].len();
    if rotated.iter().any(|r| r.len() != copies) {
        return Err(RfnError::invalid("every sample needs the same number of rotated copies"));
    }
    Ok((copies > 0).then_some(copies))
}

fn elementwise_mean<T: Real>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut acc = maps[0].clone();
    for m in &maps[1..] {
        m.ensure_shape("invariance loss", acc.shape())?;
        for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let inv = T::one() / T::lit(maps.len() as f64);
    Ok(acc.map(|v| v * inv))
}

/// Batch mean of the term between each RI and the mean of its rotated RIs.
pub fn l_ri_star<T: Real>(
    ri: &[Tensor<T>],
    rotated: &[Vec<Tensor<T>>],
    sigma: f64,
    form: KernelForm,
) -> Result<RiLoss> {
    let Some(_) = check_batches(ri, rotated)? else {
        return Ok(RiLoss {
            value: 0.0,
            degenerate: true,
        });
    };
    let mut total = 0.0;
    for (y0, copies) in ri.iter().zip(rotated) {
        total += invariance_term(y0, &elementwise_mean(copies)?, sigma, form)?;
    }
    Ok(RiLoss {
        value: total / ri.len() as f64,
        degenerate: false,
    })
}

/// `1/(2N(n−1)) Σ_i Σ_j term(y_i, y_i^{θ_j})` over every rotated copy.
pub fn l_ri_full<T: Real>(
    ri: &[Tensor<T>],
    rotated: &[Vec<Tensor<T>>],
    sigma: f64,
    form: KernelForm,
) -> Result<RiLoss> {
    let Some(copies) = check_batches(ri, rotated)? else {
        return Ok(RiLoss {
            value: 0.0,
            degenerate: true,
        });
    };
    let mut total = 0.0;
    for (y0, list) in ri.iter().zip(rotated) {
        for yr in list {
            total += invariance_term(y0, yr, sigma, form)?;
        }
    }
    Ok(RiLoss {
        value: total / (2.0 * ri.len() as f64 * copies as f64),
        degenerate: false,
    })
}

/// Mean softmax cross-entropy; `logits` is `[B, K]`.
pub fn classification_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    logits.ensure_rank("classification_loss", 2)?;
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    if rows != labels.len() || rows == 0 {
        return Err(RfnError::shape("classification_loss", logits.shape(), &[labels.len()]));
    }
    let data: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(RfnError::invalid(format!("label {label} out of range for {k} classes")));
        }
        let row = &data[r * k..(r + 1) * k];
        total += kernels::log_sum_exp(row) - row[label];
    }
    Ok(total / rows as f64)
}

/// Mean smooth-L1 over all elements.
pub fn regression_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.ensure_shape("regression_loss", target.shape())?;
    if pred.is_empty() {
        return Err(RfnError::invalid("regression_loss: empty input"));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let x = (p - t).as_f64().abs();
            if x < 1.0 {
                0.5 * x * x
            } else {
                x - 0.5
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// `cls + λ_reg·reg + λ_ri·ri`.
pub fn total_loss(cls: f64, reg: f64, ri: f64, config: &LossConfig) -> Result<LossReport> {
    for (name, v) in [("cls", cls), ("reg", reg), ("ri", ri)] {
        if !v.is_finite() {
            return Err(RfnError::NonFinite {
                op: format!("loss term {name}"),
            });
        }
    }
    Ok(LossReport {
        cls,
        reg,
        ri,
        total: cls + config.lambda_reg * reg + config.lambda_ri * ri,
    })
}

/// Median pairwise Euclidean distance between the normalized rows of
/// `[B, ...]`; `None` when fewer than two rows or all distances vanish.
pub fn median_sigma<T: Real>(batch: &Tensor<T>) -> Result<Option<f64>> {
    if batch.rank() == 0 || batch.shape()[0] < 2 {
        return Ok(None);
    }
    let rows = batch.shape()[0];
    let dim = batch.len() / rows;
    let data: Vec<f64> = batch.data().iter().map(|v| v.as_f64()).collect();
    let (unit, _) = normalize_rows(&data, rows, dim)?;
    let mut dists = Vec::with_capacity(rows * (rows - 1) / 2);
    for i in 0..rows {
        for j in i + 1..rows {
            let d: f64 = unit[i * dim..(i + 1) * dim]
                .iter()
                .zip(&unit[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok((median > 0.0).then_some(median))
}

/// Graph form of [`l_ri_star`]: `ri` and every entry of `rotated` are
/// `[B, ...]` nodes; returns a scalar node.
pub fn l_ri_star_graph<T: Real>(
    g: &mut Graph<T>,
    ri: Var,
    rotated: &[Var],
    sigma: T,
    form: KernelForm,
) -> Result<Var> {
    if rotated.is_empty() {
        return Err(RfnError::invalid("l_ri_star needs at least one rotated copy"));
    }
    let mean = g.mean_of(rotated)?;
    let per_sample = g.invariance_pair(ri, mean, sigma, form)?;
    g.mean(per_sample)
}

/// Graph form of [`l_ri_full`].
pub fn l_ri_full_graph<T: Real>(
    g: &mut Graph<T>,
    ri: Var,
    rotated: &[Var],
    sigma: T,
    form: KernelForm,
) -> Result<Var> {
    if rotated.is_empty() {
        return Err(RfnError::invalid("l_ri_full needs at least one rotated copy"));
    }
    let batch = g.shape(ri)[0];
    let mut acc: Option<Var> = None;
    for &r in rotated {
        let pair = g.invariance_pair(ri, r, sigma, form)?;
        let s = g.sum(pair)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let norm = T::one() / T::lit(2.0 * batch as f64 * rotated.len() as f64);
    g.scale(acc.expect("nonempty"), norm)
}

/// `cls + λ_reg·reg + λ_ri·ri` on graph scalars.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    cls: Var,
    reg: Var,
    ri: Option<Var>,
    config: &LossConfig,
) -> Result<Var> {
    let weighted_reg = g.scale(reg, T::lit(config.lambda_reg))?;
    let mut total = g.add(cls, weighted_reg)?;
    if let Some(ri) = ri {
        let weighted_ri = g.scale(ri, T::lit(config.lambda_ri))?;
        total = g.add(total, weighted_ri)?;
    }
    Ok(total)
}
