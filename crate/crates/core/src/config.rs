//! Run configuration: a TOML document with one section per component,
//! `section.key=value` overrides, and a canonical effective-config dump.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::harness::ablate::AblationConfig;
use crate::harness::model::{ModelConfig, ModelSpec};
use crate::harness::train::TrainConfig;
use crate::losses::LossConfig;
use crate::numcore::SgdConfig;
use crate::rfn::RfnConfig;
use crate::synthdata::{DatasetSpec, OrientationPolicy, Split, DEFAULT_IMAGE_SIZE, MAX_CLASSES};

/// Offset between the train and test data seeds chosen by [`RunConfig::with_seed`].
pub const TEST_SEED_OFFSET: u64 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub train_policy: OrientationPolicy,
    pub test_policy: OrientationPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_seed: 1,
            test_seed: 1 + TEST_SEED_OFFSET,
            train_size: 2048,
            test_size: 1024,
            classes: MAX_CLASSES,
            image_size: DEFAULT_IMAGE_SIZE,
            noise_level: 0.1,
            train_policy: OrientationPolicy::UniformRandom,
            test_policy: OrientationPolicy::UniformRandom,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, split: Split) -> DatasetSpec {
        let (seed, size, policy) = match split {
            Split::Train => (self.train_seed, self.train_size, self.train_policy),
            Split::Test => (self.test_seed, self.test_size, self.test_policy),
        };
        DatasetSpec {
            seed,
            size,
            classes: self.classes,
            policy,
            noise_level: self.noise_level,
            image_size: self.image_size,
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds initialization, shuffling and angle sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub rfn: RfnConfig,
    pub loss: LossConfig,
    pub optim: SgdConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            rfn: RfnConfig::default(),
            loss: LossConfig::default(),
            optim: SgdConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> RfnError {
    RfnError::Config(e.to_string().trim().replace('\n', " "))
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RfnError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(RfnError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cursor = table;
    for part in &path[..path.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| RfnError::Config(format!("override key {key:?}: {part} is not a section")))?;
    }
    cursor.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    /// File (if any), then overrides, then defaults for anything unset.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| RfnError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_text_with_overrides(&text, overrides)
    }

    /// `text` (a possibly partial document), then overrides, then defaults.
    pub fn from_text_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical effective configuration; parses back to an equal value.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.classes == 0 || self.data.classes > MAX_CLASSES {
            return Err(RfnError::Config(format!(
                "data.classes must be in 1..={MAX_CLASSES}, got {}",
                self.data.classes
            )));
        }
        if !(self.data.noise_level >= 0.0) || !self.data.noise_level.is_finite() {
            return Err(RfnError::Config("data.noise_level must be non-negative".into()));
        }
        self.model_spec().map(|_| ())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(&self.model, &self.rfn, self.data.image_size, self.data.classes)
    }

    /// Same configuration with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.data.train_seed = seed;
        c.data.test_seed = seed + TEST_SEED_OFFSET;
        c
    }
}
