//! Ablation grid over the block's hyperparameters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run_experiment;
use crate::config::RunConfig;
use crate::error::{Result, RfnError};
use crate::numcore::{PoolMode, ResumeMode};
use crate::rfn::InsertionStage;

pub const CSV_HEADER: &str =
    "row,label,is_baseline,n,r,pooling,resume,insertion_stage,accuracy,angular_mae,invariance_score,param_total,wall_time_s";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// The base configuration plus one row per non-base value on each axis.
    OneAtATime,
    /// Every combination of the axis values.
    Cartesian,
}

/// Axes of the grid; values equal to the base configuration's are the
/// baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub mode: GridMode,
    /// Each row is trained and evaluated once per seed; metrics are averaged.
    pub seeds: Vec<u64>,
    pub n: Vec<usize>,
    pub r: Vec<usize>,
    pub pooling: Vec<PoolMode>,
    pub resume: Vec<ResumeMode>,
    pub insertion_stage: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            mode: GridMode::OneAtATime,
            seeds: vec![1],
            n: vec![2, 4, 6, 8],
            r: vec![0, 4, 8, 16, 32],
            pooling: vec![PoolMode::GlobalMax, PoolMode::GlobalAvg],
            resume: vec![ResumeMode::Sum, ResumeMode::Max],
            insertion_stage: vec![1, 2, 3],
        }
    }
}

/// One configuration of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub is_baseline: bool,
    pub config: RunConfig,
}

fn pool_name(p: PoolMode) -> &'static str {
    match p {
        PoolMode::GlobalMax => "max",
        PoolMode::GlobalAvg => "avg",
    }
}

fn resume_name(r: ResumeMode) -> &'static str {
    match r {
        ResumeMode::Sum => "sum",
        ResumeMode::Max => "max",
    }
}

/// Applies `(n, r, pooling, resume, stage)` to `base`; a stage deeper than
/// the backbone appends stride-1 stages of the last width.
fn variant(
    base: &RunConfig,
    n: usize,
    r: usize,
    pooling: PoolMode,
    resume: ResumeMode,
    stage: usize,
) -> Result<RunConfig> {
    let mut c = base.clone();
    c.rfn.n = n;
    c.rfn.r = r;
    c.rfn.pooling = pooling;
    c.rfn.resume = resume;
    c.rfn.insertion_stage = InsertionStage::from_depth(stage)?;
    while c.model.widths.len() < stage {
        let last = *c.model.widths.last().expect("validated non-empty");
        c.model.widths.push(last);
        c.model.strides.push(1);
    }
    c.model_spec()
        .map_err(|e| RfnError::invalid(format!("grid row n={n} r={r} stage={stage}: {e}")))?;
    Ok(c)
}

fn label(base: &RunConfig, c: &RunConfig) -> String {
    let mut parts = Vec::new();
    if c.rfn.n != base.rfn.n {
        parts.push(format!("A{}", c.rfn.n));
    }
    if c.rfn.r != base.rfn.r {
        parts.push(format!("R{}", c.rfn.r));
    }
    if c.rfn.pooling != base.rfn.pooling {
        parts.push(format!("pool_{}", pool_name(c.rfn.pooling)));
    }
    if c.rfn.resume != base.rfn.resume {
        parts.push(format!("resume_{}", resume_name(c.rfn.resume)));
    }
    if c.rfn.insertion_stage != base.rfn.insertion_stage {
        parts.push(format!("stage{}", c.rfn.insertion_stage.depth()));
    }
    if parts.is_empty() {
        "baseline".into()
    } else {
        parts.join("+")
    }
}

/// Expands the grid into rows, validating every value first.
pub fn grid_rows(base: &RunConfig, grid: &AblationConfig) -> Result<Vec<GridRow>> {
    let axes_empty = grid.n.is_empty()
        || grid.r.is_empty()
        || grid.pooling.is_empty()
        || grid.resume.is_empty()
        || grid.insertion_stage.is_empty();
    if axes_empty || grid.seeds.is_empty() {
        return Err(RfnError::invalid("ablation grid has an empty axis or no seeds"));
    }
    let b = &base.rfn;
    let base_stage = b.insertion_stage.depth();
    let mut configs = Vec::new();
    match grid.mode {
        GridMode::OneAtATime => {
            configs.push(variant(base, b.n, b.r, b.pooling, b.resume, base_stage)?);
            for &r in grid.r.iter().filter(|&&r| r != b.r) {
                configs.push(variant(base, b.n, r, b.pooling, b.resume, base_stage)?);
            }
            for &n in grid.n.iter().filter(|&&n| n != b.n) {
                configs.push(variant(base, n, b.r, b.pooling, b.resume, base_stage)?);
            }
            for &p in grid.pooling.iter().filter(|&&p| p != b.pooling) {
                configs.push(variant(base, b.n, b.r, p, b.resume, base_stage)?);
            }
            for &m in grid.resume.iter().filter(|&&m| m != b.resume) {
                configs.push(variant(base, b.n, b.r, b.pooling, m, base_stage)?);
            }
            for &s in grid.insertion_stage.iter().filter(|&&s| s != base_stage) {
                configs.push(variant(base, b.n, b.r, b.pooling, b.resume, s)?);
            }
        }
        GridMode::Cartesian => {
            for &s in &grid.insertion_stage {
                for &n in &grid.n {
                    for &r in &grid.r {
                        for &p in &grid.pooling {
                            for &m in &grid.resume {
                                configs.push(variant(base, n, r, p, m, s)?);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(configs
        .into_iter()
        .map(|config| {
            let label = label(base, &config);
            GridRow {
                is_baseline: label == "baseline",
                label,
                config,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub label: String,
    pub is_baseline: bool,
    pub n: usize,
    pub r: usize,
    pub pooling: PoolMode,
    pub resume: ResumeMode,
    pub insertion_stage: usize,
    pub accuracy: f64,
    pub angular_mae: f64,
    pub invariance_score: f64,
    pub param_total: usize,
    pub wall_time_s: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.row,
            self.label,
            self.is_baseline,
            self.n,
            self.r,
            pool_name(self.pooling),
            resume_name(self.resume),
            self.insertion_stage,
            self.accuracy,
            self.angular_mae,
            self.invariance_score,
            self.param_total,
            self.wall_time_s
        )
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Worker count from `RFN_THREADS` (default 1).
pub fn thread_budget() -> Result<usize> {
    match std::env::var("RFN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| RfnError::Config(format!("RFN_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

/// Trains and evaluates every row for every seed. Rows are independent and
/// may run on up to `threads` workers; output order is grid order.
pub fn ablate(base: &RunConfig, grid: &AblationConfig, threads: usize) -> Result<Vec<AblationRow>> {
    let rows = grid_rows(base, grid)?;
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|i| grid.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| RfnError::invalid(format!("thread pool: {e}")))?;
    let reports = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| run_experiment(&rows[i].config.with_seed(seed)).map(|e| e.report))
            .collect::<Result<Vec<_>>>()
    })?;
    let per_row = grid.seeds.len();
    Ok(rows
        .iter()
        .zip(reports.chunks(per_row))
        .enumerate()
        .map(|(i, (row, reps))| {
            let mean = |f: fn(&super::MetricsReport) -> f64| reps.iter().map(f).sum::<f64>() / reps.len() as f64;
            AblationRow {
                row: i,
                label: row.label.clone(),
                is_baseline: row.is_baseline,
                n: row.config.rfn.n,
                r: row.config.rfn.r,
                pooling: row.config.rfn.pooling,
                resume: row.config.rfn.resume,
                insertion_stage: row.config.rfn.insertion_stage.depth(),
                accuracy: mean(|m| m.accuracy),
                angular_mae: mean(|m| m.angular_mae),
                invariance_score: mean(|m| m.invariance_score),
                param_total: reps[0].param_total,
                wall_time_s: reps.iter().map(|m| m.wall_time_s).sum(),
            }
        })
        .collect())
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    fs::write(path, to_csv(rows))?;
    Ok(())
}
