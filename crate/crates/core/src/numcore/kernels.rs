//! Numeric forward/backward kernels on flat row-major buffers.
//!
//! Everything here is shape-checked by the caller ([`super::graph`]); the
//! kernels only index. Reductions run in a fixed order so results are
//! bitwise reproducible on one thread.

use serde::{Deserialize, Serialize};

use super::tensor::Real;

/// `[m×k] · [k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    grad: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &grad[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&g, &bv) in grow.iter().zip(brow) {
                acc += g * bv;
            }
            ga[i * k + p] = acc;
            let av = a[i * k + p];
            if av != T::zero() {
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, &g) in gbrow.iter_mut().zip(grow) {
                    *o += av * g;
                }
            }
        }
    }
    (ga, gb)
}

/// Geometry of an NHWC cross-correlation with an `[kh, kw, cin, cout]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_height(), self.out_width(), self.cout]
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d<T: Real>(x: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![T::zero(); g.batch * oh * ow * g.cout];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * g.cout;
                let orow = &mut out[obase..obase + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.height) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.width) else { continue };
                        let ibase = ((b * g.height + iy) * g.width + ix) * g.cin;
                        for ci in 0..g.cin {
                            let xv = x[ibase + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let kbase = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            for (o, &kv) in orow.iter_mut().zip(&kernel[kbase..kbase + g.cout]) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d kernel)`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    grad: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * g.cout;
                let grow = &grad[obase..obase + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.height) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.width) else { continue };
                        let ibase = ((b * g.height + iy) * g.width + ix) * g.cin;
                        for ci in 0..g.cin {
                            let kbase = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                            let krow = &kernel[kbase..kbase + g.cout];
                            let mut acc = T::zero();
                            for (&gv, &kv) in grow.iter().zip(krow) {
                                acc += gv * kv;
                            }
                            gx[ibase + ci] += acc;
                            let xv = x[ibase + ci];
                            if xv != T::zero() {
                                let gkrow = &mut gk[kbase..kbase + g.cout];
                                for (o, &gv) in gkrow.iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// A linear resampling of a square `side × side` plane: every output pixel
/// is a weighted sum of at most four source pixels.
#[derive(Clone, Debug, PartialEq)]
pub enum PlaneMap {
    /// `source[p]` is the input pixel copied to output pixel `p`.
    Permutation { side: usize, source: Vec<usize> },
    /// Up to four `(source pixel, weight)` taps per output pixel; taps
    /// falling outside the plane are dropped (zero fill).
    Taps {
        side: usize,
        taps: Vec<Vec<(usize, f64)>>,
    },
}

impl PlaneMap {
    pub fn side(&self) -> usize {
        match self {
            PlaneMap::Permutation { side, .. } | PlaneMap::Taps { side, .. } => *side,
        }
    }

    /// Applies the map to every channel of a `[side, side, channels]` plane,
    /// writing into channels `offset..offset + channels` of a
    /// `[side, side, out_channels]` buffer.
    #[inline]
    fn apply<T: Real>(&self, src: &[T], channels: usize, dst: &mut [T], out_channels: usize, offset: usize) {
        match self {
            PlaneMap::Permutation { source, .. } => {
                for (p, &s) in source.iter().enumerate() {
                    let o = p * out_channels + offset;
                    dst[o..o + channels].copy_from_slice(&src[s * channels..(s + 1) * channels]);
                }
            }
            PlaneMap::Taps { taps, .. } => {
                for (p, list) in taps.iter().enumerate() {
                    let o = p * out_channels + offset;
                    let out = &mut dst[o..o + channels];
                    out.fill(T::zero());
                    for &(s, w) in list {
                        let w = T::lit(w);
                        for (acc, &v) in out.iter_mut().zip(&src[s * channels..(s + 1) * channels]) {
                            *acc += w * v;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`apply`](Self::apply): accumulates into `acc`.
    #[inline]
    fn apply_transpose<T: Real>(&self, grad: &[T], out_channels: usize, offset: usize, acc: &mut [T], channels: usize) {
        match self {
            PlaneMap::Permutation { source, .. } => {
                for (p, &s) in source.iter().enumerate() {
                    let g = &grad[p * out_channels + offset..p * out_channels + offset + channels];
                    for (a, &v) in acc[s * channels..(s + 1) * channels].iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            PlaneMap::Taps { taps, .. } => {
                for (p, list) in taps.iter().enumerate() {
                    let g = &grad[p * out_channels + offset..p * out_channels + offset + channels];
                    for &(s, w) in list {
                        let w = T::lit(w);
                        for (a, &v) in acc[s * channels..(s + 1) * channels].iter_mut().zip(g) {
                            *a += w * v;
                        }
                    }
                }
            }
        }
    }
}

/// `[B, S, S, C]` → `[B, S, S, n·C]` with channel block `k` holding `maps[k]`
/// applied to every input channel.
pub fn resample_stack<T: Real>(x: &[T], batch: usize, channels: usize, maps: &[PlaneMap]) -> Vec<T> {
    let n = maps.len();
    let side = maps[0].side();
    let plane = side * side;
    let out_c = n * channels;
    let mut out = vec![T::zero(); batch * plane * out_c];
    for b in 0..batch {
        let src = &x[b * plane * channels..(b + 1) * plane * channels];
        let dst = &mut out[b * plane * out_c..(b + 1) * plane * out_c];
        for (k, map) in maps.iter().enumerate() {
            map.apply(src, channels, dst, out_c, k * channels);
        }
    }
    out
}

pub fn resample_stack_backward<T: Real>(
    grad: &[T],
    batch: usize,
    channels: usize,
    maps: &[PlaneMap],
) -> Vec<T> {
    let n = maps.len();
    let side = maps[0].side();
    let plane = side * side;
    let out_c = n * channels;
    let mut gx = vec![T::zero(); batch * plane * channels];
    for b in 0..batch {
        let g = &grad[b * plane * out_c..(b + 1) * plane * out_c];
        let acc = &mut gx[b * plane * channels..(b + 1) * plane * channels];
        for (k, map) in maps.iter().enumerate() {
            map.apply_transpose(g, out_c, k * channels, acc, channels);
        }
    }
    gx
}

/// Spatial reduction used to squeeze a stack to one value per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[serde(alias = "max")]
    GlobalMax,
    #[serde(alias = "avg")]
    GlobalAvg,
}

/// Reduction across the angle slabs of a rotated stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResumeMode {
    Sum,
    Max,
}

/// `[B, P, C]` → `[B, C]`; for max mode also returns the winning position
/// per `(b, c)`, first in scan order on ties.
pub fn global_pool<T: Real>(
    x: &[T],
    batch: usize,
    positions: usize,
    channels: usize,
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let mut out = vec![T::zero(); batch * channels];
    let mut arg = Vec::new();
    match mode {
        PoolMode::GlobalMax => {
            arg = vec![0usize; batch * channels];
            for b in 0..batch {
                let base = b * positions * channels;
                let best = &mut out[b * channels..(b + 1) * channels];
                let best_p = &mut arg[b * channels..(b + 1) * channels];
                best.copy_from_slice(&x[base..base + channels]);
                for p in 1..positions {
                    let row = &x[base + p * channels..base + (p + 1) * channels];
                    for ((bv, bp), &v) in best.iter_mut().zip(best_p.iter_mut()).zip(row) {
                        if v > *bv {
                            *bv = v;
                            *bp = p;
                        }
                    }
                }
            }
        }
        PoolMode::GlobalAvg => {
            let inv = T::one() / T::lit(positions as f64);
            for b in 0..batch {
                let base = b * positions * channels;
                let o = &mut out[b * channels..(b + 1) * channels];
                for p in 0..positions {
                    for (c, acc) in o.iter_mut().enumerate() {
                        *acc += x[base + p * channels + c];
                    }
                }
                for v in o.iter_mut() {
                    *v *= inv;
                }
            }
        }
    }
    (out, arg)
}

pub fn global_pool_backward<T: Real>(
    grad: &[T],
    argmax: &[usize],
    batch: usize,
    positions: usize,
    channels: usize,
    mode: PoolMode,
) -> Vec<T> {
    let mut gx = vec![T::zero(); batch * positions * channels];
    match mode {
        PoolMode::GlobalMax => {
            for b in 0..batch {
                for c in 0..channels {
                    let p = argmax[b * channels + c];
                    gx[(b * positions + p) * channels + c] += grad[b * channels + c];
                }
            }
        }
        PoolMode::GlobalAvg => {
            let inv = T::one() / T::lit(positions as f64);
            for b in 0..batch {
                for p in 0..positions {
                    for c in 0..channels {
                        gx[(b * positions + p) * channels + c] = grad[b * channels + c] * inv;
                    }
                }
            }
        }
    }
    gx
}

/// `stack[b, p, k·C + c] * weights[b, k]`.
pub fn scale_slabs<T: Real>(
    weights: &[T],
    stack: &[T],
    batch: usize,
    positions: usize,
    n: usize,
    channels: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); stack.len()];
    let row = n * channels;
    for b in 0..batch {
        let w = &weights[b * n..(b + 1) * n];
        for p in 0..positions {
            let base = (b * positions + p) * row;
            for k in 0..n {
                let s = base + k * channels;
                for c in 0..channels {
                    out[s + c] = w[k] * stack[s + c];
                }
            }
        }
    }
    out
}

/// Returns `(d weights, d stack)`.
pub fn scale_slabs_backward<T: Real>(
    weights: &[T],
    stack: &[T],
    grad: &[T],
    batch: usize,
    positions: usize,
    n: usize,
    channels: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); weights.len()];
    let mut gs = vec![T::zero(); stack.len()];
    let row = n * channels;
    for b in 0..batch {
        for p in 0..positions {
            let base = (b * positions + p) * row;
            for k in 0..n {
                let w = weights[b * n + k];
                let s = base + k * channels;
                let mut acc = T::zero();
                for c in 0..channels {
                    acc += grad[s + c] * stack[s + c];
                    gs[s + c] = w * grad[s + c];
                }
                gw[b * n + k] += acc;
            }
        }
    }
    (gw, gs)
}

/// `[R, n·C]` → `[R, C]` across the `n` angle slabs; max mode returns the
/// winning slab per output element (lowest angle index on ties).
pub fn resume<T: Real>(
    stack: &[T],
    rows: usize,
    n: usize,
    channels: usize,
    mode: ResumeMode,
) -> (Vec<T>, Vec<u32>) {
    let mut out = vec![T::zero(); rows * channels];
    let mut arg = Vec::new();
    let width = n * channels;
    match mode {
        ResumeMode::Sum => {
            for r in 0..rows {
                let o = &mut out[r * channels..(r + 1) * channels];
                for k in 0..n {
                    let s = &stack[r * width + k * channels..r * width + (k + 1) * channels];
                    for (acc, &v) in o.iter_mut().zip(s) {
                        *acc += v;
                    }
                }
            }
        }
        ResumeMode::Max => {
            arg = vec![0u32; rows * channels];
            for r in 0..rows {
                for c in 0..channels {
                    let mut best = stack[r * width + c];
                    let mut best_k = 0u32;
                    for k in 1..n {
                        let v = stack[r * width + k * channels + c];
                        if v > best {
                            best = v;
                            best_k = k as u32;
                        }
                    }
                    out[r * channels + c] = best;
                    arg[r * channels + c] = best_k;
                }
            }
        }
    }
    (out, arg)
}

pub fn resume_backward<T: Real>(
    grad: &[T],
    argmax: &[u32],
    rows: usize,
    n: usize,
    channels: usize,
    mode: ResumeMode,
) -> Vec<T> {
    let width = n * channels;
    let mut gs = vec![T::zero(); rows * width];
    for r in 0..rows {
        for c in 0..channels {
            let g = grad[r * channels + c];
            match mode {
                ResumeMode::Sum => {
                    for k in 0..n {
                        gs[r * width + k * channels + c] = g;
                    }
                }
                ResumeMode::Max => {
                    let k = argmax[r * channels + c] as usize;
                    gs[r * width + k * channels + c] = g;
                }
            }
        }
    }
    gs
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where it saturates in the working precision.
pub fn sigmoid<T: Real>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(upper)
}

/// Row-wise softmax of `[rows, k]`, computed stably.
pub fn softmax_rows<T: Real>(logits: &[T], rows: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * k];
    for r in 0..rows {
        let row = &logits[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in &mut out[r * k..(r + 1) * k] {
            *o = *o / z;
        }
    }
    out
}

/// Log-sum-exp of one row.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + z.ln()
}
