use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;
use rfn_core::checkpoint::Checkpoint;
use rfn_core::config::RunConfig;
use rfn_core::features::{dump_features, FeatureStage};
use rfn_core::harness::{self, ablate, history_csv, model_grad_check, run_on};
use rfn_core::numcore::GradCheckConfig;
use rfn_core::synthdata::{gen_dataset, load_dataset, save_dataset, Dataset, Split};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Rotated feature networks on synthetic oriented shapes.
#[derive(Parser, Debug)]
#[command(name = "rfn", version, about, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set rfn.n=8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.set)?)
    }

    /// Like [`load`](Self::load), but a missing `--config` falls back to
    /// the configuration embedded in `checkpoint`.
    fn load_for(&self, checkpoint: &Checkpoint) -> Result<RunConfig> {
        match &self.config {
            Some(_) => self.load(),
            None => Ok(RunConfig::from_text_with_overrides(&checkpoint.config_text, &self.set)?),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Input,
    Stack,
    Ri,
    Rs,
}

impl From<StageArg> for FeatureStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Input => FeatureStage::Input,
            StageArg::Stack => FeatureStage::Stack,
            StageArg::Ri => FeatureStage::Ri,
            StageArg::Rs => FeatureStage::Rs,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Output dataset file.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run seed (initialization, shuffling, angle sampling).
        #[arg(long)]
        seed: Option<u64>,
        /// Training set file instead of generating one.
        #[arg(long, value_name = "PATH")]
        train_data: Option<PathBuf>,
        /// Test set file instead of generating one.
        #[arg(long, value_name = "PATH")]
        test_data: Option<PathBuf>,
        /// Receives effective_config.toml, checkpoint.rfn, metrics.json and history.csv.
        #[arg(long, value_name = "DIR", default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset file instead of regenerating the configured test split.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid and write a CSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Receives effective_config.toml and ablation.csv.
        #[arg(long, value_name = "DIR", default_value = "ablation")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the full model and loss at 64-bit.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Batch size of the checked objective.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write per-channel PGM heat maps of one sample's feature maps.
    DumpFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Sample index in the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Dataset file instead of regenerating the configured test split.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

fn dataset(file: Option<&Path>, config: &RunConfig, split: Split) -> Result<Dataset> {
    match file {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(gen_dataset(&config.data.spec(split))?),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, split, out } => {
            let config = cfg.load()?;
            let data = gen_dataset(&config.data.spec(split.into()))?;
            save_dataset(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            cfg,
            seed,
            train_data,
            test_data,
            out_dir,
        } => {
            let mut config = cfg.load()?;
            if let Some(s) = seed {
                config.seed = s;
            }
            create_dir(&out_dir)?;
            write(&out_dir.join("effective_config.toml"), config.to_toml()?)?;
            let train_set = dataset(train_data.as_deref(), &config, Split::Train)?;
            let test_set = dataset(test_data.as_deref(), &config, Split::Test)?;
            let exp = run_on(&config, &train_set, &test_set)?;
            exp.checkpoint
                .save(&out_dir.join("checkpoint.rfn"))
                .context("writing checkpoint")?;
            write(&out_dir.join("metrics.json"), serde_json::to_string_pretty(&exp.report)?)?;
            write(&out_dir.join("history.csv"), history_csv(&exp.report.history))?;
            let r = &exp.report;
            println!(
                "accuracy {:.4}  angular_mae {:.4}  invariance_score {:.3e}  params {}  ({:.1}s)",
                r.accuracy, r.angular_mae, r.invariance_score, r.param_total, r.wall_time_s
            );
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let config = cfg.load_for(&ckpt)?;
            let spec = config.model_spec()?;
            let params = ckpt.params_for(&spec)?;
            let test_set = dataset(data.as_deref(), &config, Split::Test)?;
            let report = harness::evaluate(&spec, &params, &test_set, &config.loss)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write(&p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Ablate { cfg, out_dir } => {
            let config = cfg.load()?;
            let threads = harness::ablate::thread_budget()?;
            create_dir(&out_dir)?;
            write(&out_dir.join("effective_config.toml"), config.to_toml()?)?;
            let rows = ablate(&config, &config.ablation, threads)?;
            let csv = out_dir.join("ablation.csv");
            harness::ablate::write_csv(&rows, &csv).with_context(|| format!("writing {}", csv.display()))?;
            print!("{}", harness::ablate::to_csv(&rows));
        }
        Command::GradCheck {
            cfg,
            samples,
            tolerance,
        } => {
            let config = cfg.load()?;
            let report = model_grad_check(&config, samples, &GradCheckConfig::with_tolerance(tolerance))?;
            println!("{report}");
            if !report.passed() {
                bail!(
                    "gradient check failed: max relative error {:.3e} exceeds {tolerance:.1e}",
                    report.max_rel_error()
                );
            }
        }
        Command::DumpFeatures {
            cfg,
            checkpoint,
            stage,
            index,
            data,
            out_dir,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let config = cfg.load_for(&ckpt)?;
            let spec = config.model_spec()?;
            let params = ckpt.params_for(&spec)?;
            let set = dataset(data.as_deref(), &config, Split::Test)?;
            let Some(sample) = set.samples.get(index) else {
                bail!("sample index {index} out of range for {} samples", set.len());
            };
            let files = dump_features(&spec, &params, sample, stage.into(), &out_dir)?;
            println!("wrote {} files to {}", files.len(), out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
