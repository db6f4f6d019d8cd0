//! Raw feature-map heat maps as 8-bit binary PGM files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::harness::model::ModelSpec;
use crate::harness::train::Batch;
use crate::numcore::{Graph, ParamStore, Tensor};
use crate::synthdata::ShapeSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    /// The input image.
    Input,
    /// Every slab of the rotated stack, `n·C` maps.
    Stack,
    /// Rotation-invariant output, `C` maps.
    Ri,
    /// Rotation-sensitive output, `C` maps.
    Rs,
}

impl FeatureStage {
    pub fn name(self) -> &'static str {
        match self {
            FeatureStage::Input => "input",
            FeatureStage::Stack => "stack",
            FeatureStage::Ri => "ri",
            FeatureStage::Rs => "rs",
        }
    }
}

impl std::str::FromStr for FeatureStage {
    type Err = RfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(FeatureStage::Input),
            "stack" => Ok(FeatureStage::Stack),
            "ri" => Ok(FeatureStage::Ri),
            "rs" => Ok(FeatureStage::Rs),
            other => Err(RfnError::invalid(format!(
                "unknown feature stage {other:?} (expected input, stack, ri or rs)"
            ))),
        }
    }
}

/// Min-max quantization to `0..=255` (round half away from zero); a
/// constant channel maps to all zeros.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi as f64 - lo as f64;
    if !(range > 0.0) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v as f64 - lo as f64) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// `P5` header followed by `width·height` bytes.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes every channel of an `[S, S, K]` map as a PGM named by `name(k)`.
fn write_channels(map: &Tensor<f32>, dir: &Path, name: impl Fn(usize) -> String) -> Result<Vec<PathBuf>> {
    let s = map.shape();
    let (h, w, k) = (s[0], s[1], s[2]);
    let mut paths = Vec::with_capacity(k);
    for c in 0..k {
        let channel: Vec<f32> = map.data().iter().skip(c).step_by(k).copied().collect();
        let path = dir.join(name(c));
        let mut f = fs::File::create(&path)
            .map_err(|e| RfnError::invalid(format!("cannot write {}: {e}", path.display())))?;
        f.write_all(&pgm_bytes(w, h, &quantize(&channel)))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Dumps the chosen stage for one sample; returns the files written.
pub fn dump_features(
    spec: &ModelSpec,
    params: &ParamStore<f32>,
    sample: &ShapeSample,
    stage: FeatureStage,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    spec.check_params(params)?;
    fs::create_dir_all(dir)
        .map_err(|e| RfnError::invalid(format!("cannot create output directory {}: {e}", dir.display())))?;
    let batch = Batch::<f32>::from_samples(&[sample])?;
    let unbatch = |t: &Tensor<f32>| t.reshape(&t.shape()[1..]);
    if stage == FeatureStage::Input {
        return write_channels(&unbatch(&batch.images)?, dir, |c| format!("input_c{c:02}.pgm"));
    }
    let mut g = Graph::<f32>::new();
    let vars = spec.bind(&mut g, params, false);
    let images = g.constant(batch.images.clone());
    let features = spec.features(&mut g, &vars, images)?;
    match stage {
        FeatureStage::Stack => {
            let block = spec
                .block()
                .ok_or_else(|| RfnError::invalid("the identity neck has no rotated stack"))?;
            let stack = g.rotate_channels(features, block.maps().clone())?;
            let c = block.channels;
            write_channels(&unbatch(g.value(stack))?, dir, |i| {
                format!("stack_a{:02}_c{:02}.pgm", i / c, i % c)
            })
        }
        FeatureStage::Ri | FeatureStage::Rs => {
            let (ri, rs, _) = spec.neck(&mut g, &vars, features)?;
            let node = if stage == FeatureStage::Ri { ri } else { rs };
            let prefix = stage.name();
            write_channels(&unbatch(g.value(node))?, dir, |c| format!("{prefix}_c{c:02}.pgm"))
        }
        FeatureStage::Input => unreachable!("handled above"),
    }
}
