//! The rotated feature block: encoder (rotate, concatenate, pool, gate,
//! scale) and decoder (resume into rotation-invariant and
//! rotation-sensitive maps).
//!
//! Feature maps are NHWC. The rotated stack of a `[B, S, S, C]` input is
//! stored as `[B, S, S, n·C]` with channel block `k` holding the copy rotated
//! by `θ_k`; the gate produces one weight per angle and per sample.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::numcore::{kernels, Graph, PlaneMap, PoolMode, Real, ResumeMode, Tensor, Var};
use crate::rng::Rng;
use crate::rotation::AngleSet;

pub const FORCED_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionStage {
    AfterStage1,
    AfterStage2,
    AfterStage3,
}

impl InsertionStage {
    /// Number of backbone stages that run before the block.
    pub fn depth(self) -> usize {
        match self {
            InsertionStage::AfterStage1 => 1,
            InsertionStage::AfterStage2 => 2,
            InsertionStage::AfterStage3 => 3,
        }
    }

    pub fn from_depth(depth: usize) -> Result<Self> {
        match depth {
            1 => Ok(InsertionStage::AfterStage1),
            2 => Ok(InsertionStage::AfterStage2),
            3 => Ok(InsertionStage::AfterStage3),
            other => Err(RfnError::invalid(format!("insertion stage must be 1, 2 or 3, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfnConfig {
    /// Number of rotation angles.
    pub n: usize,
    /// Reduction ratio of the first gate layer; 0 removes the bottleneck.
    pub r: usize,
    pub pooling: PoolMode,
    pub resume: ResumeMode,
    pub insertion_stage: InsertionStage,
    /// Replace the learned gate with the constant weight 0.5 for every angle.
    pub uniform_weights: bool,
}

impl Default for RfnConfig {
    fn default() -> Self {
        Self {
            n: 4,
            r: 8,
            pooling: PoolMode::GlobalMax,
            resume: ResumeMode::Sum,
            insertion_stage: InsertionStage::AfterStage2,
            uniform_weights: false,
        }
    }
}

impl RfnConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.n == 0 {
            return Err(RfnError::invalid("rfn.n must be at least 1"));
        }
        if channels == 0 {
            return Err(RfnError::invalid("rfn block needs at least one channel"));
        }
        let width = self.n * channels;
        if self.r != 0 && width % self.r != 0 {
            return Err(RfnError::invalid(format!(
                "reduction ratio {} does not divide n·C = {}·{} = {width}",
                self.r, self.n, channels
            )));
        }
        Ok(())
    }

    /// Width of the gate's hidden layer, `None` for the single-layer variant.
    pub fn hidden_width(&self, channels: usize) -> Option<usize> {
        (self.r != 0).then(|| self.n * channels / self.r)
    }

    /// Shapes of the gate weights, in parameter order.
    pub fn param_shapes(&self, channels: usize) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.validate(channels)?;
        let width = self.n * channels;
        Ok(match self.hidden_width(channels) {
            Some(hidden) => vec![("w1", vec![width, hidden]), ("w2", vec![hidden, self.n])],
            None => vec![("w1", vec![width, self.n])],
        })
    }
}

/// Learnable gate weights: `w1: [n·C, n·C/r]`, `w2: [n·C/r, n]`, or a
/// single `w1: [n·C, n]` when `r = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RfnParams<T: Real = f32> {
    pub w1: Tensor<T>,
    pub w2: Option<Tensor<T>>,
}

impl<T: Real> RfnParams<T> {
    pub fn zeros(config: &RfnConfig, channels: usize) -> Result<Self> {
        let shapes = config.param_shapes(channels)?;
        Ok(Self {
            w1: Tensor::zeros(&shapes[0].1),
            w2: shapes.get(1).map(|(_, s)| Tensor::zeros(s)),
        })
    }

    pub fn from_tensors(config: &RfnConfig, channels: usize, w1: Tensor<T>, w2: Option<Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes(channels)?;
        w1.ensure_shape("rfn params", &shapes[0].1)?;
        match (shapes.get(1), &w2) {
            (Some((_, s)), Some(w)) => w.ensure_shape("rfn params", s)?,
            (None, None) => {}
            _ => {
                return Err(RfnError::ArchitectureMismatch(
                    "gate layer count does not match the reduction ratio".into(),
                ))
            }
        }
        Ok(Self { w1, w2 })
    }

    pub fn count(&self) -> usize {
        self.w1.len() + self.w2.as_ref().map_or(0, Tensor::len)
    }
}

impl RfnParams<f32> {
    pub fn truncated_normal(config: &RfnConfig, channels: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let shapes = config.param_shapes(channels)?;
        let mut draw = |s: &[usize]| crate::numcore::init::truncated_normal(s, std, rng);
        Ok(Self {
            w1: draw(&shapes[0].1),
            w2: shapes.get(1).map(|(_, s)| draw(s)),
        })
    }
}

/// Output of [`rfn_forward`] for one `[S, S, C]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct RfnOutput<T: Real = f32> {
    /// Resumed from the reweighted stack.
    pub ri: Tensor<T>,
    /// Resumed from the unweighted stack.
    pub rs: Tensor<T>,
    /// Per-angle gate weights, length `n`.
    pub weights: Tensor<T>,
}

/// Graph handles of the gate parameters.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub w2: Option<Var>,
}

/// Graph handles produced by [`forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub stack: Var,
    pub weights: Var,
    pub ri: Var,
    pub rs: Var,
}

/// Rotation maps for a given spatial size, built once per block.
#[derive(Clone, Debug)]
pub struct RfnBlock {
    pub config: RfnConfig,
    pub channels: usize,
    pub side: usize,
    maps: Arc<[PlaneMap]>,
}

impl RfnBlock {
    pub fn new(config: RfnConfig, channels: usize, side: usize) -> Result<Self> {
        config.validate(channels)?;
        let maps = AngleSet::new(config.n)?.plane_maps(side);
        Ok(Self {
            config,
            channels,
            side,
            maps,
        })
    }

    pub fn maps(&self) -> &Arc<[PlaneMap]> {
        &self.maps
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.config, self.channels).expect("validated at construction")
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &RfnParams<T>) -> GateVars {
        GateVars {
            w1: g.param(params.w1.clone()),
            w2: params.w2.as_ref().map(|w| g.param(w.clone())),
        }
    }

    /// Gate weights `[B, n]` from pooled descriptors `[B, n·C]`.
    pub fn gate<T: Real>(&self, g: &mut Graph<T>, pooled: Var, gate: &GateVars) -> Result<Var> {
        let batch = g.shape(pooled)[0];
        if self.config.uniform_weights {
            return Ok(g.constant(Tensor::full(&[batch, self.config.n], T::lit(FORCED_WEIGHT))));
        }
        let mut h = g.linear(pooled, gate.w1)?;
        if let Some(w2) = gate.w2 {
            h = g.relu(h)?;
            h = g.linear(h, w2)?;
        }
        g.sigmoid(h)
    }

    /// Encoder and decoder on a `[B, S, S, C]` node.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, gate: &GateVars) -> Result<BlockNodes> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[3] != self.channels {
            return Err(RfnError::shape("rfn_forward", xs, &[self.side, self.side, self.channels]));
        }
        let stack = g.rotate_channels(x, self.maps.clone())?;
        let pooled = g.global_pool(stack, self.config.pooling)?;
        let weights = self.gate(g, pooled, gate)?;
        let scaled = g.scale_stack(weights, stack)?;
        let ri = g.resume(scaled, self.config.n, self.config.resume)?;
        let rs = g.resume(stack, self.config.n, self.config.resume)?;
        Ok(BlockNodes { stack, weights, ri, rs })
    }
}

/// Per-channel max or mean over all positions of `[S, S, K]`, giving `[K]`.
pub fn global_pool<T: Real>(m: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    m.ensure_rank("global_pool", 3)?;
    let s = m.shape();
    if s[0] * s[1] == 0 {
        return Err(RfnError::invalid("global_pool: empty spatial extent"));
    }
    let (out, _) = kernels::global_pool(m.data(), 1, s[0] * s[1], s[2], mode);
    Tensor::new(&[s[2]], out)
}

/// `sigmoid(relu(G·W1)·W2)`, or `sigmoid(G·W1)` for the single-layer gate.
pub fn attention_weights<T: Real>(pooled: &Tensor<T>, params: &RfnParams<T>) -> Result<Tensor<T>> {
    pooled.ensure_rank("attention_weights", 1)?;
    let mut g = Graph::new();
    let x = g.constant(pooled.reshape(&[1, pooled.len()])?);
    let w1 = g.constant(params.w1.clone());
    let mut h = g.linear(x, w1)?;
    if let Some(w2) = &params.w2 {
        let w2 = g.constant(w2.clone());
        h = g.relu(h)?;
        h = g.linear(h, w2)?;
    }
    let w = g.sigmoid(h)?;
    let v = g.value(w);
    v.reshape(&[v.len()])
}

/// Converts an angle-leading `[n, S, S, C]` stack to the interleaved
/// `[1, S, S, n·C]` layout and back.
fn to_interleaved<T: Real>(stack: &Tensor<T>) -> Result<(Tensor<T>, [usize; 4])> {
    stack.ensure_rank("rotated stack", 4)?;
    let s = stack.shape();
    let dims = [s[0], s[1], s[2], s[3]];
    let (n, p, c) = (dims[0], dims[1] * dims[2], dims[3]);
    let mut out = vec![T::zero(); stack.len()];
    for k in 0..n {
        for pos in 0..p {
            for ch in 0..c {
                out[pos * n * c + k * c + ch] = stack.data()[(k * p + pos) * c + ch];
            }
        }
    }
    Ok((Tensor::new(&[1, dims[1], dims[2], n * c], out)?, dims))
}

fn from_interleaved<T: Real>(x: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    let (n, p, c) = (dims[0], dims[1] * dims[2], dims[3]);
    let mut out = vec![T::zero(); x.len()];
    for k in 0..n {
        for pos in 0..p {
            for ch in 0..c {
                out[(k * p + pos) * c + ch] = x.data()[pos * n * c + k * c + ch];
            }
        }
    }
    Tensor::new(&dims, out)
}

/// `S_k = ω_k · M'_k` for an angle-leading `[n, S, S, C]` stack.
pub fn scale_stack<T: Real>(weights: &Tensor<T>, stack: &Tensor<T>) -> Result<Tensor<T>> {
    stack.ensure_rank("scale_stack", 4)?;
    if weights.rank() != 1 || weights.len() != stack.shape()[0] {
        return Err(RfnError::shape("scale_stack", weights.shape(), stack.shape()));
    }
    let (inter, dims) = to_interleaved(stack)?;
    let n = dims[0];
    let out = kernels::scale_slabs(weights.data(), inter.data(), 1, dims[1] * dims[2], n, dims[3]);
    from_interleaved(&Tensor::new(inter.shape(), out)?, dims)
}

/// Elementwise reduction of `[n, S, S, C]` over the angle axis.
pub fn resume<T: Real>(stack: &Tensor<T>, mode: ResumeMode) -> Result<Tensor<T>> {
    stack.ensure_rank("resume", 4)?;
    let s = stack.shape();
    if s[0] == 0 {
        return Err(RfnError::invalid("resume: empty stack"));
    }
    let (inter, dims) = to_interleaved(stack)?;
    let (out, _) = kernels::resume(inter.data(), dims[1] * dims[2], dims[0], dims[3], mode);
    Tensor::new(&[dims[1], dims[2], dims[3]], out)
}

/// Full block on one `[S, S, C]` map.
pub fn rfn_forward<T: Real>(x: &Tensor<T>, params: &RfnParams<T>, config: &RfnConfig) -> Result<RfnOutput<T>> {
    x.ensure_rank("rfn_forward", 3)?;
    let s = x.shape().to_vec();
    if s[0] != s[1] {
        return Err(RfnError::invalid(format!("rfn_forward needs square maps, got {}×{}", s[0], s[1])));
    }
    let block = RfnBlock::new(config.clone(), s[2], s[0])?;
    RfnParams::from_tensors(config, s[2], params.w1.clone(), params.w2.clone())?;
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(&[1, s[0], s[1], s[2]])?);
    let gate = GateVars {
        w1: g.constant(params.w1.clone()),
        w2: params.w2.as_ref().map(|w| g.constant(w.clone())),
    };
    let nodes = block.forward_graph(&mut g, xv, &gate)?;
    Ok(RfnOutput {
        ri: g.value(nodes.ri).reshape(&s)?,
        rs: g.value(nodes.rs).reshape(&s)?,
        weights: g.value(nodes.weights).reshape(&[config.n])?,
    })
}

/// Gate parameter count: `nC·(nC/r) + (nC/r)·n`, or `nC·n` when `r = 0`.
pub fn param_count(config: &RfnConfig, channels: usize) -> Result<usize> {
    Ok(config
        .param_shapes(channels)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Named gate tensors for a parameter store.
pub fn named_params<T: Real>(prefix: &str, params: &RfnParams<T>) -> IndexMap<String, Tensor<T>> {
    let mut out = IndexMap::new();
    out.insert(format!("{prefix}.w1"), params.w1.clone());
    if let Some(w2) = &params.w2 {
        out.insert(format!("{prefix}.w2"), w2.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, r: usize) -> RfnConfig {
        RfnConfig {
            n,
            r,
            ..RfnConfig::default()
        }
    }

    #[test]
    fn param_count_by_hand() {
        assert_eq!(param_count(&cfg(4, 8), 8).unwrap(), 144);
        assert_eq!(param_count(&cfg(4, 0), 8).unwrap(), 128);
        assert!(param_count(&cfg(2, 32), 8).is_err());
    }

    #[test]
    fn param_count_grows_with_angles() {
        let counts: Vec<usize> = [2, 4, 6, 8].iter().map(|&n| param_count(&cfg(n, 8), 16).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn zero_params_give_half_weights() {
        let p = RfnParams::<f64>::zeros(&cfg(4, 8), 8).unwrap();
        let g = Tensor::from_fn(&[32], |i| i as f64 - 7.0);
        let w = attention_weights(&g, &p).unwrap();
        assert_eq!(w.data(), &[0.5; 4]);
    }

    #[test]
    fn hand_computed_two_angle_gate() {
        // n=2, C=1, r=1: W1 [2×2], W2 [2×2]
        // G = [1, -2], W1 = [[0.5, -1], [-1, 0.25]]
        // G·W1 = [0.5 + 2, -1 - 0.5] = [2.5, -1.5] → relu [2.5, 0]
        // W2 = [[0.4, -0.2], [3, 3]] → [1.0, -0.5] → sigmoid
        let config = cfg(2, 1);
        let p = RfnParams::from_tensors(
            &config,
            1,
            Tensor::new(&[2, 2], vec![0.5, -1.0, -1.0, 0.25]).unwrap(),
            Some(Tensor::new(&[2, 2], vec![0.4, -0.2, 3.0, 3.0]).unwrap()),
        )
        .unwrap();
        let g = Tensor::new(&[2], vec![1.0f64, -2.0]).unwrap();
        let w = attention_weights(&g, &p).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert!((w.data()[0] - s(1.0)).abs() < 1e-15);
        assert!((w.data()[1] - s(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn gate_output_length_is_angle_count() {
        let config = cfg(4, 8);
        let mut rng = Rng::new(5);
        let p = RfnParams::truncated_normal(&config, 8, 0.5, &mut rng).unwrap();
        let g = Tensor::from_fn(&[32], |i| (i as f32).cos());
        assert_eq!(attention_weights(&g, &p).unwrap().len(), 4);
    }

    #[test]
    fn pool_modes() {
        let m = Tensor::full(&[3, 3, 2], 1.5f64);
        assert_eq!(global_pool(&m, PoolMode::GlobalMax).unwrap().data(), &[1.5, 1.5]);
        assert_eq!(global_pool(&m, PoolMode::GlobalAvg).unwrap().data(), &[1.5, 1.5]);
        let mut peak = Tensor::<f64>::zeros(&[3, 3, 1]);
        peak.set(&[1, 2, 0], 9.0);
        assert_eq!(global_pool(&peak, PoolMode::GlobalMax).unwrap().item(), 9.0);
    }

    #[test]
    fn scale_stack_identity_and_annihilation() {
        let stack = Tensor::from_fn(&[2, 2, 2, 3], |i| i as f64 + 1.0);
        let ones = Tensor::full(&[2], 1.0);
        assert_eq!(scale_stack(&ones, &stack).unwrap(), stack);
        let zeros = Tensor::zeros(&[2]);
        assert!(scale_stack(&zeros, &stack).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(scale_stack(&Tensor::zeros(&[3]), &stack).is_err());
    }

    #[test]
    fn resume_linearity_and_idempotence() {
        let slab = Tensor::from_fn(&[2, 2, 3], |i| (i as f64).sin());
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(slab.data());
        }
        let stack = Tensor::new(&[3, 2, 2, 3], data).unwrap();
        let summed = resume(&stack, ResumeMode::Sum).unwrap();
        for (a, b) in summed.data().iter().zip(slab.data()) {
            assert!((a - 3.0 * b).abs() < 1e-15);
        }
        assert_eq!(resume(&stack, ResumeMode::Max).unwrap(), slab);
    }

    #[test]
    fn single_angle_degenerates() {
        let config = cfg(1, 1);
        let mut rng = Rng::new(2);
        let p32 = RfnParams::truncated_normal(&config, 3, 0.3, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 4, 3], |i| ((i * 7) % 5) as f32 - 2.0);
        let out = rfn_forward(&x, &p32, &config).unwrap();
        assert_eq!(out.rs, x);
        let w = out.weights.item();
        for (ri, xv) in out.ri.data().iter().zip(x.data()) {
            assert_eq!(*ri, w * xv);
        }
    }

    #[test]
    fn weights_strictly_inside_unit_interval() {
        let config = cfg(4, 4);
        let mut rng = Rng::new(9);
        let p = RfnParams::truncated_normal(&config, 2, 50.0, &mut rng).unwrap();
        let x = Tensor::from_fn(&[5, 5, 2], |i| (i as f32 * 13.0).sin() * 100.0);
        let out = rfn_forward(&x, &p, &config).unwrap();
        assert!(out.weights.data().iter().all(|&w| w > 0.0 && w < 1.0), "{:?}", out.weights);
    }
}
