//! Model assembly, training, evaluation and the ablation runner.

pub mod ablate;
pub mod check;
pub mod metrics;
pub mod model;
pub mod train;

use std::time::Instant;

pub use ablate::{ablate, AblationConfig, AblationRow, GridMode};
pub use check::model_grad_check;
pub use metrics::{evaluate, MetricsReport};
pub use model::{ModelConfig, ModelSpec, Neck};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::synthdata::{gen_dataset, Dataset, Split};

/// Result of one train-then-evaluate run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
}

/// Generates both splits, trains, and evaluates on the test split.
pub fn run_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let train_set = gen_dataset(&config.data.spec(Split::Train))?;
    let test_set = gen_dataset(&config.data.spec(Split::Test))?;
    run_on(config, &train_set, &test_set)
}

/// Trains on `train_set` and evaluates on `test_set`.
pub fn run_on(config: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<Experiment> {
    let spec = config.model_spec()?;
    let start = Instant::now();
    let outcome = train(&spec, train_set, &config.train, &config.optim, &config.loss, config.seed)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = evaluate(&spec, &outcome.params, test_set, &config.loss)?;
    report.wall_time_s = elapsed;
    report.history = outcome.history;
    Ok(Experiment {
        checkpoint: Checkpoint::new(config.to_toml()?, outcome.params),
        report,
    })
}

/// `epoch,learning_rate,total,cls,reg,ri,train_accuracy,ri_skipped` rows.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,learning_rate,total,cls,reg,ri,train_accuracy,ri_skipped\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            h.epoch, h.learning_rate, h.total, h.cls, h.reg, h.ri, h.train_accuracy, h.ri_skipped
        ));
    }
    out
}
