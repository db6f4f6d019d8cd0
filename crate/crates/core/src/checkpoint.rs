//! Versioned binary snapshot of named parameter tensors plus the
//! configuration text that produced them.
//!
//! Layout (little-endian): magic `RFN1`, version u16, config length u32 and
//! UTF-8 config text, tensor count u32, then per tensor: name length u16 and
//! UTF-8 name, rank u8, one u32 per dimension, f32 values.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Result, RfnError};
use crate::harness::model::ModelSpec;
use crate::numcore::{ParamStore, Tensor};
use crate::synthdata::{check_magic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFN1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config_text: String, tensors: ParamStore<f32>) -> Self {
        Self { config_text, tensors }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml_str(&self.config_text)
    }

    /// The tensors, after checking every name and shape against `spec`.
    pub fn params_for(&self, spec: &ModelSpec) -> Result<ParamStore<f32>> {
        spec.check_params(&self.tensors)?;
        Ok(self.tensors.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        let cfg_len = u32::try_from(cfg.len()).map_err(|_| RfnError::invalid("config text too long"))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(cfg);
        let count = u32::try_from(self.tensors.len()).map_err(|_| RfnError::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| RfnError::invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| RfnError::invalid("dimension exceeds u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_magic(r.array("magic")?, CHECKPOINT_MAGIC)?;
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(RfnError::UnsupportedVersion {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let cfg_len = r.u32("config length")? as usize;
        let config_text = String::from_utf8(r.take(cfg_len, "config text")?.to_vec())
            .map_err(|_| RfnError::Malformed("config text is not UTF-8".into()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| RfnError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| RfnError::Malformed(format!("tensor {name} is too large")))?;
            let values = r.f32s(len, "tensor values")?;
            let t = Tensor::new(&shape, values).map_err(|e| RfnError::Malformed(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(RfnError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        r.finish()?;
        Ok(Self { config_text, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
