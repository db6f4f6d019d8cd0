//! Mini-batch SGD on the total loss `cls + λ_reg·reg + λ_ri·ri`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::model::{ForwardNodes, ModelSpec, Neck};
use crate::error::{Result, RfnError};
use crate::losses::{l_ri_full_graph, l_ri_star_graph, median_sigma, total_loss_graph, LossConfig, SigmaMode};
use crate::numcore::{Graph, OptState, ParamStore, Real, SgdConfig, Tensor, Var};
use crate::rng::Rng;
use crate::synthdata::{Dataset, ShapeSample};

/// RNG stream labels derived from the run seed.
pub const INIT_STREAM: u64 = 0x1417;
pub const SHUFFLE_STREAM: u64 = 0x5487;
pub const ANGLE_STREAM: u64 = 0xA261;

/// Which rotated copies enter the invariance term each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiAngles {
    /// All `n − 1` non-identity angles.
    All,
    /// One non-identity angle drawn per batch.
    Sampled,
}

/// What gets rotated to produce the copies compared by the invariance term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiSource {
    /// The backbone output (the block's input).
    Features,
    /// The input images, re-run through the backbone.
    Images,
}

/// Aggregation of the invariance term over rotated copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiLossForm {
    /// One term per sample against the mean of its rotated RI maps.
    Star,
    /// One term per (sample, angle) pair.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplicative learning-rate decay...
    pub lr_decay: f64,
    /// ...applied every this many epochs.
    pub decay_every: usize,
    pub ri_angles: RiAngles,
    pub ri_source: RiSource,
    pub ri_loss: RiLossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr_decay: 0.95,
            decay_every: 10,
            ri_angles: RiAngles::All,
            ri_source: RiSource::Features,
            ri_loss: RiLossForm::Star,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RfnError::invalid("train.batch_size must be positive"));
        }
        if self.decay_every == 0 {
            return Err(RfnError::invalid("train.decay_every must be positive"));
        }
        if !(self.lr_decay > 0.0) || !self.lr_decay.is_finite() {
            return Err(RfnError::invalid("train.lr_decay must be positive"));
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn learning_rate(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Epoch means of the loss terms (weighted by batch size).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub ri: f64,
    pub train_accuracy: f64,
    /// Batches whose invariance term was skipped because an RI map was all zero.
    pub ri_skipped: usize,
}

/// Images, labels and `(sin, cos)` targets of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Real = f32> {
    /// `[B, S, S, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// `[B, 2]`.
    pub targets: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&ShapeSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(RfnError::invalid("empty batch"));
        };
        let side = first.image.shape()[0];
        let mut images = Vec::with_capacity(samples.len() * side * side);
        let mut targets = Vec::with_capacity(samples.len() * 2);
        for s in samples {
            s.image.ensure_shape("batch", &[side, side])?;
            images.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
            targets.extend(s.orientation_target().iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Self {
            images: Tensor::new(&[samples.len(), side, side, 1], images)?,
            labels: samples.iter().map(|s| s.class_id).collect(),
            targets: Tensor::new(&[samples.len(), 2], targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub forward: ForwardNodes,
    pub cls: Var,
    pub reg: Var,
    /// `None` when the term is disabled or skipped.
    pub ri: Option<Var>,
    pub total: Var,
    /// The term was wanted but an all-zero RI map made it undefined.
    pub ri_skipped: bool,
}

fn rows_nonzero<T: Real>(t: &Tensor<T>) -> bool {
    let rows = t.shape()[0];
    let dim = t.len() / rows.max(1);
    t.data().chunks(dim.max(1)).all(|r| r.iter().any(|&v| v != T::zero()))
}

/// Builds the total loss for `batch`; `angles` are the indices `k ∈ 1..n` of
/// the rotated copies entering the invariance term.
pub fn batch_objective<T: Real>(
    spec: &ModelSpec,
    g: &mut Graph<T>,
    vars: &IndexMap<String, Var>,
    batch: &Batch<T>,
    loss: &LossConfig,
    train: &TrainConfig,
    angles: &[usize],
) -> Result<BatchLoss> {
    let images = g.constant(batch.images.clone());
    let forward = spec.forward(g, vars, images)?;
    let cls = g.classification_loss(forward.logits, &batch.labels)?;
    let reg = g.regression_loss(forward.orientation, &batch.targets)?;
    let wants_ri = spec.neck == Neck::Rfn && loss.lambda_ri > 0.0 && !angles.is_empty();
    let mut ri = None;
    let mut ri_skipped = false;
    if wants_ri {
        let mut rotated = Vec::with_capacity(angles.len());
        for &k in angles {
            let r = match train.ri_source {
                RiSource::Features => {
                    let x = g.rotate_channels(forward.features, spec.feature_rotation(k))?;
                    spec.ri(g, vars, x)?
                }
                RiSource::Images => {
                    let im = g.rotate_channels(images, spec.image_rotation(k))?;
                    let x = spec.features(g, vars, im)?;
                    spec.ri(g, vars, x)?
                }
            };
            rotated.push(r);
        }
        let defined = rows_nonzero(g.value(forward.ri)) && rotated.iter().all(|&r| rows_nonzero(g.value(r)));
        if defined {
            let sigma = match loss.sigma_mode {
                SigmaMode::Fixed => loss.sigma,
                SigmaMode::Median => median_sigma(g.value(forward.ri))?.unwrap_or(loss.sigma),
            };
            let term = match train.ri_loss {
                RiLossForm::Star => l_ri_star_graph(g, forward.ri, &rotated, T::lit(sigma), loss.kernel_form)?,
                RiLossForm::Full => l_ri_full_graph(g, forward.ri, &rotated, T::lit(sigma), loss.kernel_form)?,
            };
            ri = Some(term);
        } else {
            ri_skipped = true;
        }
    }
    let total = total_loss_graph(g, cls, reg, ri, loss)?;
    Ok(BatchLoss {
        forward,
        cls,
        reg,
        ri,
        total,
        ri_skipped,
    })
}

/// Rotated-copy indices for one batch.
pub fn ri_angles(n: usize, mode: RiAngles, rng: &mut Rng) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    match mode {
        RiAngles::All => (1..n).collect(),
        RiAngles::Sampled => vec![1 + rng.below(n as u64 - 1) as usize],
    }
}

/// Per-batch values reported by [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub ri: f64,
    pub correct: usize,
    pub ri_skipped: bool,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits` whose first maximum is at the label.
pub fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// One forward/backward pass and SGD update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    spec: &ModelSpec,
    params: &mut ParamStore<f32>,
    opt: &mut OptState<f32>,
    batch: &Batch<f32>,
    loss: &LossConfig,
    train: &TrainConfig,
    angles: &[usize],
) -> Result<StepReport> {
    let mut g = Graph::<f32>::new();
    let vars = spec.bind(&mut g, params, true);
    let out = batch_objective(spec, &mut g, &vars, batch, loss, train, angles)?;
    g.backward(out.total)?;
    let grads: IndexMap<String, Tensor<f32>> = vars
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t.clone())))
        .collect();
    opt.step(params, &grads)?;
    let scalar = |v: Var| g.value(v).item() as f64;
    Ok(StepReport {
        total: scalar(out.total),
        cls: scalar(out.cls),
        reg: scalar(out.reg),
        ri: out.ri.map_or(0.0, scalar),
        correct: count_correct(g.value(out.forward.logits), &batch.labels),
        ri_skipped: out.ri_skipped,
    })
}

/// Final parameters and per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
}

/// Trains from the seeded initialization.
pub fn train(
    spec: &ModelSpec,
    dataset: &Dataset,
    train: &TrainConfig,
    optim: &SgdConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let params = spec.init_params(&mut Rng::stream(seed, INIT_STREAM));
    train_from(spec, params, dataset, train, optim, loss, seed)
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(RfnError) -> RfnError {
    move |e| match e {
        RfnError::NonFinite { op } => RfnError::Diverged { epoch, batch, term: op },
        other => other,
    }
}

/// Trains starting from `params`.
pub fn train_from(
    spec: &ModelSpec,
    mut params: ParamStore<f32>,
    dataset: &Dataset,
    train: &TrainConfig,
    optim: &SgdConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    loss.validate()?;
    spec.check_params(&params)?;
    if dataset.is_empty() {
        return Err(RfnError::invalid("training set is empty"));
    }
    if dataset.image_size != spec.image_size {
        return Err(RfnError::invalid(format!(
            "dataset images are {0}×{0}, model expects {1}×{1}",
            dataset.image_size, spec.image_size
        )));
    }
    if let Some(bad) = dataset.samples.iter().find(|s| s.class_id >= spec.classes) {
        return Err(RfnError::invalid(format!(
            "sample class {} exceeds the model's {} classes",
            bad.class_id, spec.classes
        )));
    }
    let mut shuffle = Rng::stream(seed, SHUFFLE_STREAM);
    let mut angle_rng = Rng::stream(seed, ANGLE_STREAM);
    let mut opt = OptState::<f32>::new(optim);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let lr = train.learning_rate(optim.learning_rate, epoch);
        opt.learning_rate = lr as f32;
        shuffle.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut correct = 0;
        let mut skipped = 0;
        for (b, chunk) in order.chunks(train.batch_size).enumerate() {
            let samples: Vec<&ShapeSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let batch = Batch::<f32>::from_samples(&samples)?;
            let angles = ri_angles(spec.rfn.n, train.ri_angles, &mut angle_rng);
            let step = train_step(spec, &mut params, &mut opt, &batch, loss, train, &angles)
                .map_err(diverged(epoch + 1, b + 1))?;
            if let Some(bad) = params.iter().find(|(_, t)| !t.is_finite()) {
                return Err(RfnError::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                    term: format!("parameter {}", bad.0),
                });
            }
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip([step.total, step.cls, step.reg, step.ri]) {
                *s += w * v;
            }
            correct += step.correct;
            skipped += step.ri_skipped as usize;
        }
        let n = dataset.len() as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            total: sums[0] / n,
            cls: sums[1] / n,
            reg: sums[2] / n,
            ri: sums[3] / n,
            train_accuracy: correct as f64 / n,
            ri_skipped: skipped,
        });
    }
    Ok(TrainOutcome { params, history })
}
