//! Channel-wise rotation of square feature maps.
//!
//! Rotation is counterclockwise as displayed (row index grows downward),
//! about the pixel-grid center `((S−1)/2, (S−1)/2)`. Multiples of a quarter
//! turn are exact pixel permutations; any other angle uses inverse-mapping
//! bilinear interpolation with zero fill outside the source.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::Arc;

use crate::error::{Result, RfnError};
use crate::numcore::{PlaneMap, Real, Tensor};

/// Angles within this distance of a quarter-turn multiple take the exact path.
pub const EXACT_ANGLE_TOLERANCE: f64 = 1e-6;

/// The `n` uniformly spaced angles `k·2π/n`, `k = 0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleSet {
    angles: Vec<f64>,
}

impl AngleSet {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(RfnError::invalid("angle count must be at least 1"));
        }
        let angles = (0..n).map(|k| k as f64 * TAU / n as f64).collect();
        Ok(Self { angles })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Resampling maps for a `side × side` plane, one per angle.
    pub fn plane_maps(&self, side: usize) -> Arc<[PlaneMap]> {
        self.angles.iter().map(|&a| plane_map(side, a)).collect()
    }
}

pub fn angle_set(n: usize) -> Result<AngleSet> {
    AngleSet::new(n)
}

/// Number of counterclockwise quarter turns if `theta` is (numerically) one.
pub fn quarter_turns(theta: f64) -> Option<usize> {
    let k = (theta / FRAC_PI_2).round();
    ((theta - k * FRAC_PI_2).abs() <= EXACT_ANGLE_TOLERANCE).then(|| k.rem_euclid(4.0) as usize)
}

/// Resampling map rotating a `side × side` plane by `theta`.
pub fn plane_map(side: usize, theta: f64) -> PlaneMap {
    let last = side.saturating_sub(1);
    if let Some(turns) = quarter_turns(theta) {
        let source = (0..side * side)
            .map(|p| {
                let (i, j) = (p / side, p % side);
                let (si, sj) = match turns {
                    0 => (i, j),
                    1 => (j, last - i),
                    2 => (last - i, last - j),
                    _ => (last - j, i),
                };
                si * side + sj
            })
            .collect();
        return PlaneMap::Permutation { side, source };
    }
    let center = last as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let taps = (0..side * side)
        .map(|p| {
            let y = (p / side) as f64 - center;
            let x = (p % side) as f64 - center;
            // Destination (x, y) comes from the source rotated back by theta.
            let xs = cos * x - sin * y + center;
            let ys = sin * x + cos * y + center;
            bilinear_taps(ys, xs, side)
        })
        .collect();
    PlaneMap::Taps { side, taps }
}

fn bilinear_taps(ys: f64, xs: f64, side: usize) -> Vec<(usize, f64)> {
    let (y0, x0) = (ys.floor(), xs.floor());
    let (fy, fx) = (ys - y0, xs - x0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            let w = wy * wx;
            if w == 0.0 || yy < 0.0 || xx < 0.0 || yy >= side as f64 || xx >= side as f64 {
                continue;
            }
            taps.push((yy as usize * side + xx as usize, w));
        }
    }
    taps
}

/// Rotates a square `[S, S]` plane by `theta` radians counterclockwise.
pub fn rotate_map<T: Real>(plane: &Tensor<T>, theta: f64) -> Result<Tensor<T>> {
    plane.ensure_rank("rotate_map", 2)?;
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    if h != w {
        return Err(RfnError::invalid(format!("rotate_map needs a square plane, got {h}×{w}")));
    }
    if !theta.is_finite() {
        return Err(RfnError::invalid("rotation angle must be finite"));
    }
    let x = plane.reshape(&[1, h, w, 1])?;
    let out = rotate_channels(&x, &[theta])?;
    out.into_reshaped(&[h, w])
}

/// Rotates every channel of `[B, S, S, C]` by each angle, concatenating the
/// results angle-major into `[B, S, S, n·C]`.
pub fn rotate_channels<T: Real>(x: &Tensor<T>, angles: &[f64]) -> Result<Tensor<T>> {
    x.ensure_rank("rotate_channels", 4)?;
    let s = x.shape();
    if s[1] != s[2] {
        return Err(RfnError::invalid(format!(
            "rotation needs square feature maps, got {}×{}",
            s[1], s[2]
        )));
    }
    if angles.is_empty() {
        return Err(RfnError::invalid("rotate_channels: no angles"));
    }
    let maps: Vec<PlaneMap> = angles.iter().map(|&a| plane_map(s[1], a)).collect();
    let data = crate::numcore::kernels::resample_stack(x.data(), s[0], s[3], &maps);
    Tensor::new(&[s[0], s[1], s[2], angles.len() * s[3]], data)
}

/// The rotated copies of one `[S, S, C]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedStack<T: Real = f32> {
    /// `per_angle[k]` is the input rotated by `θ_k`, shape `[S, S, C]`.
    pub per_angle: Vec<Tensor<T>>,
    /// Angle-major concatenation along channels, shape `[S, S, n·C]`.
    pub concatenated: Tensor<T>,
}

pub fn build_rotated_stack<T: Real>(x: &Tensor<T>, angles: &AngleSet) -> Result<RotatedStack<T>> {
    x.ensure_rank("build_rotated_stack", 3)?;
    let s = x.shape().to_vec();
    let batched = x.reshape(&[1, s[0], s[1], s[2]])?;
    let stack = rotate_channels(&batched, angles.angles())?;
    let c = s[2];
    let n = angles.len();
    let per_angle = (0..n)
        .map(|k| {
            let data = stack
                .data()
                .chunks(n * c)
                .flat_map(|row| row[k * c..(k + 1) * c].iter().copied())
                .collect();
            Tensor::new(&s, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let concatenated = stack.into_reshaped(&[s[0], s[1], n * c])?;
    Ok(RotatedStack {
        per_angle,
        concatenated,
    })
}
