//! Deterministic oriented-shape images.
//!
//! Each class is a fixed glyph (bar, L, T, wedge) rendered upright with
//! 4×4 supersampled coverage, rotated about the image center and overlaid
//! with seeded uniform noise. The regression target for a sample is its
//! orientation, encoded as `(sin θ, cos θ)`.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::numcore::Tensor;
use crate::rng::Rng;
use crate::rotation::rotate_map;

pub const DATASET_MAGIC: &[u8; 4] = b"RFND";
pub const DATASET_VERSION: u16 = 1;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const MAX_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; MAX_CLASSES] = ["bar", "L", "T", "wedge"];

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `[S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub class_id: usize,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
    pub noise_seed: u64,
}

impl ShapeSample {
    /// `(sin θ, cos θ)`.
    pub fn orientation_target(&self) -> [f32; 2] {
        let t = self.orientation as f64;
        [t.sin() as f32, t.cos() as f32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationPolicy {
    /// Uniform on `[0, 2π)`.
    UniformRandom,
    /// Uniform over the four quarter turns.
    AxisAlignedOnly,
    /// Always upright.
    Upright,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    pub classes: usize,
    pub policy: OrientationPolicy,
    pub noise_level: f64,
    pub image_size: usize,
    pub split: Split,
}

impl DatasetSpec {
    pub fn new(seed: u64, size: usize, policy: OrientationPolicy, split: Split) -> Self {
        Self {
            seed,
            size,
            classes: MAX_CLASSES,
            policy,
            noise_level: 0.1,
            image_size: DEFAULT_IMAGE_SIZE,
            split,
        }
    }
}

/// Samples in generation order. Only these fields are persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub classes: usize,
    pub samples: Vec<ShapeSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }
}

fn check_class(class_id: usize) -> Result<()> {
    if class_id >= MAX_CLASSES {
        return Err(RfnError::invalid(format!(
            "class {class_id} does not exist (have {MAX_CLASSES} shape families)"
        )));
    }
    Ok(())
}

/// Coverage test in glyph units: `x` right, `y` down, origin at the image
/// center, 32 units across the image.
fn inside(class_id: usize, x: f64, y: f64) -> bool {
    let rect = |x0: f64, x1: f64, y0: f64, y1: f64| x >= x0 && x <= x1 && y >= y0 && y <= y1;
    match class_id {
        0 => rect(-2.5, 2.5, -11.0, 7.0),
        1 => rect(-8.0, -3.0, -10.0, 10.0) || rect(-8.0, 9.0, 5.0, 10.0),
        2 => rect(-10.0, 10.0, -10.0, -5.0) || rect(-2.5, 2.5, -5.0, 10.0),
        _ => {
            // Triangle (0, -11), (-8, 9), (8, 9).
            if !(-11.0..=9.0).contains(&y) {
                return false;
            }
            let half = 8.0 * (y + 11.0) / 20.0;
            x.abs() <= half
        }
    }
}

/// Upright glyph for `class_id` on an `S × S` canvas.
pub fn canonical_template(class_id: usize, size: usize) -> Result<Tensor<f32>> {
    check_class(class_id)?;
    if size == 0 {
        return Err(RfnError::invalid("image size must be positive"));
    }
    let center = (size as f64 - 1.0) / 2.0;
    let unit = size as f64 / DEFAULT_IMAGE_SIZE as f64;
    let sub = SUPERSAMPLE as f64;
    Ok(Tensor::from_fn(&[size, size], |p| {
        let (i, j) = ((p / size) as f64, (p % size) as f64);
        let mut hits = 0usize;
        for si in 0..SUPERSAMPLE {
            for sj in 0..SUPERSAMPLE {
                let y = i - 0.5 + (si as f64 + 0.5) / sub - center;
                let x = j - 0.5 + (sj as f64 + 0.5) / sub - center;
                if inside(class_id, x / unit, y / unit) {
                    hits += 1;
                }
            }
        }
        (hits as f64 / (sub * sub)) as f32
    }))
}

/// Renders one sample: upright template, rotated by `orientation`, plus
/// uniform noise in `[−noise_level, noise_level]`, clamped to `[0, 1]`.
pub fn gen_sample(seed: u64, class_id: usize, orientation: f32, noise_level: f64, size: usize) -> Result<ShapeSample> {
    check_class(class_id)?;
    if !orientation.is_finite() {
        return Err(RfnError::invalid("orientation must be finite"));
    }
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(RfnError::invalid(format!("noise level must be non-negative, got {noise_level}")));
    }
    let template = canonical_template(class_id, size)?;
    let mut image = rotate_map(&template, orientation as f64)?;
    if noise_level > 0.0 {
        let mut rng = Rng::new(seed);
        for v in image.data_mut() {
            let noisy = *v as f64 + rng.uniform(-noise_level, noise_level);
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
    } else {
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(ShapeSample {
        image,
        class_id,
        orientation,
        noise_seed: seed,
    })
}

fn draw_orientation(policy: OrientationPolicy, rng: &mut Rng) -> f32 {
    match policy {
        OrientationPolicy::UniformRandom => {
            let t = rng.uniform(0.0, TAU) as f32;
            // f32 rounding can land exactly on 2π.
            if t as f64 >= TAU {
                0.0
            } else {
                t
            }
        }
        OrientationPolicy::AxisAlignedOnly => (rng.below(4) as f64 * FRAC_PI_2) as f32,
        OrientationPolicy::Upright => 0.0,
    }
}

/// Class-balanced dataset; labels are shuffled, orientations and noise seeds
/// come from independent streams of `spec.seed`.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > MAX_CLASSES {
        return Err(RfnError::invalid(format!(
            "class count must be in 1..={MAX_CLASSES}, got {}",
            spec.classes
        )));
    }
    if spec.size < spec.classes {
        return Err(RfnError::invalid(format!(
            "dataset size {} is smaller than the class count {}",
            spec.size, spec.classes
        )));
    }
    let mut labels: Vec<usize> = (0..spec.size).map(|i| i % spec.classes).collect();
    Rng::stream(spec.seed, 1).shuffle(&mut labels);
    let mut angles = Rng::stream(spec.seed, 2);
    let mut seeds = Rng::stream(spec.seed, 3);
    let samples = labels
        .into_iter()
        .map(|class_id| {
            let orientation = draw_orientation(spec.policy, &mut angles);
            gen_sample(seeds.next_u64(), class_id, orientation, spec.noise_level, spec.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: spec.image_size,
        classes: spec.classes,
        samples,
    })
}

/// Little-endian layout: magic, version u16, count u32, S u16, K u16, then
/// per sample class u16, orientation f32, seed u64 and `S·S` f32 pixels.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let s = u16::try_from(dataset.image_size).map_err(|_| RfnError::invalid("image size exceeds u16"))?;
    let k = u16::try_from(dataset.classes).map_err(|_| RfnError::invalid("class count exceeds u16"))?;
    let count = u32::try_from(dataset.len()).map_err(|_| RfnError::invalid("too many samples"))?;
    let plane = dataset.image_size * dataset.image_size;
    let mut out = Vec::with_capacity(14 + dataset.len() * (14 + 4 * plane));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&s.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for sample in &dataset.samples {
        sample.image.ensure_shape("dataset encode", &[dataset.image_size, dataset.image_size])?;
        out.extend_from_slice(&(sample.class_id as u16).to_le_bytes());
        out.extend_from_slice(&sample.orientation.to_le_bytes());
        out.extend_from_slice(&sample.noise_seed.to_le_bytes());
        for v in sample.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(RfnError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(RfnError::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(RfnError::Malformed(format!(
                "{} trailing bytes after the last record",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_magic(found: [u8; 4], expected: &[u8; 4]) -> Result<()> {
    if &found != expected {
        return Err(RfnError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    check_magic(r.array("magic")?, DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(RfnError::UnsupportedVersion {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = r.u32("sample count")? as usize;
    let size = r.u16("image size")? as usize;
    let classes = r.u16("class count")? as usize;
    let plane = size * size;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let class_id = r.u16("sample class")? as usize;
        if class_id >= classes {
            return Err(RfnError::Malformed(format!("class {class_id} out of range for {classes} classes")));
        }
        let orientation = r.f32("sample orientation")?;
        let noise_seed = r.u64("sample seed")?;
        let pixels = r.f32s(plane, "sample pixels")?;
        samples.push(ShapeSample {
            image: Tensor::new(&[size, size], pixels)?,
            class_id,
            orientation,
            noise_seed,
        });
    }
    r.finish()?;
    Ok(Dataset {
        image_size: size,
        classes,
        samples,
    })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(dataset)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
