//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value and the
//! provenance needed for the backward pass. Nodes are appended in evaluation
//! order, so walking the tape backwards visits each node once, in reverse
//! topological order.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry, PlaneMap, PoolMode, ResumeMode};
use super::tensor::{Real, Tensor};
use crate::error::{Result, RfnError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// How a Gaussian RBF value enters the per-pair invariance term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// Kernel-induced squared distance `2·(1 − k)`; zero at equality.
    Distance,
    /// The raw similarity `k`.
    Similarity,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry },
    AddBias { x: Var, bias: Var },
    Activation { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Resample { x: Var, maps: Arc<[PlaneMap]>, batch: usize, channels: usize },
    GlobalPool { x: Var, mode: PoolMode, argmax: Vec<usize>, batch: usize, positions: usize, channels: usize },
    ScaleSlabs { weights: Var, stack: Var, batch: usize, positions: usize, n: usize, channels: usize },
    Resume { stack: Var, mode: ResumeMode, argmax: Vec<u32>, rows: usize, n: usize, channels: usize },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SmoothL1 { pred: Var, diff: Vec<T> },
    InvariancePair(Box<InvariancePair<T>>),
}

struct InvariancePair<T> {
    a: Var,
    b: Var,
    sigma: T,
    form: KernelForm,
    dim: usize,
    a_hat: Vec<T>,
    b_hat: Vec<T>,
    a_norm: Vec<T>,
    b_norm: Vec<T>,
    kernel: Vec<T>,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Activation { kind: Activation::Relu, .. } => "relu",
            Op::Activation { kind: Activation::Sigmoid, .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Resample { .. } => "rotate_channels",
            Op::GlobalPool { .. } => "global_pool",
            Op::ScaleSlabs { .. } => "scale_stack",
            Op::Resume { .. } => "resume",
            Op::SoftmaxXent { .. } => "classification_loss",
            Op::SmoothL1 { .. } => "regression_loss",
            Op::InvariancePair(_) => "invariance_distance",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Values are immutable once pushed; gradients are
/// filled in by [`Graph::backward`].
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Name of the operation that produced `v`.
    pub fn provenance(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(RfnError::NonFinite { op: op.name().to_string() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// `x[B×Din] · w[Din×Dout]`, no bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(RfnError::shape("linear", xs, ws));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let out = kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        self.push(value, Op::MatMul { a: x, b: w, m, k, n }, &[x, w])
    }

    /// NHWC cross-correlation with zero padding; `kernel` is `[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(RfnError::shape("conv2d", xs, ks));
        }
        if ks[0] == 0 || ks[1] == 0 {
            return Err(RfnError::invalid(format!("conv2d: empty kernel {ks:?}")));
        }
        if stride == 0 {
            return Err(RfnError::invalid("conv2d: stride must be positive"));
        }
        if xs[1] + 2 * pad < ks[0] || xs[2] + 2 * pad < ks[1] {
            return Err(RfnError::shape("conv2d", xs, ks));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            cin: xs[3],
            kh: ks[0],
            kw: ks[1],
            cout: ks[3],
            stride,
            pad,
        };
        let out = kernels::conv2d(self.value(x).data(), self.value(kernel).data(), &geom);
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push(value, Op::Conv2d { x, kernel, geom }, &[x, kernel])
    }

    /// Adds a `[D]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(RfnError::shape("add_bias", xs, bs));
        }
        let d = bs[0];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_shape("add", self.shape(b))?;
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += w;
        }
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| RfnError::invalid("mean_of: empty input list"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        if xs.len() == 1 {
            return Ok(acc);
        }
        self.scale(acc, T::one() / T::lit(xs.len() as f64))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(RfnError::invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        self.push(value, Op::Mean { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// `[B, S, S, C]` → `[B, S, S, n·C]`, channel block `k` resampled by `maps[k]`.
    pub fn rotate_channels(&mut self, x: Var, maps: Arc<[PlaneMap]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(RfnError::invalid(format!("rotate_channels: expected [B,H,W,C], got {xs:?}")));
        }
        let Some(first) = maps.first() else {
            return Err(RfnError::invalid("rotate_channels: no angles"));
        };
        let side = first.side();
        if xs[1] != xs[2] {
            return Err(RfnError::invalid(format!(
                "rotate_channels: spatial extent must be square, got {}×{}",
                xs[1], xs[2]
            )));
        }
        if xs[1] != side || maps.iter().any(|m| m.side() != side) {
            return Err(RfnError::shape("rotate_channels", &xs, &[side, side]));
        }
        let (batch, channels) = (xs[0], xs[3]);
        let out = kernels::resample_stack(self.value(x).data(), batch, channels, &maps);
        let value = Tensor::new(&[batch, side, side, maps.len() * channels], out)?;
        self.push(value, Op::Resample { x, maps, batch, channels }, &[x])
    }

    /// `[B, H, W, C]` → `[B, C]`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(RfnError::invalid(format!("global_pool: expected [B,H,W,C], got {xs:?}")));
        }
        let (batch, positions, channels) = (xs[0], xs[1] * xs[2], xs[3]);
        if positions == 0 {
            return Err(RfnError::invalid("global_pool: empty spatial extent"));
        }
        let (out, argmax) = kernels::global_pool(self.value(x).data(), batch, positions, channels, mode);
        let value = Tensor::new(&[batch, channels], out)?;
        let op = Op::GlobalPool { x, mode, argmax, batch, positions, channels };
        self.push(value, op, &[x])
    }

    /// Multiplies angle slab `k` of `stack[B, H, W, n·C]` by `weights[B, n]`.
    pub fn scale_stack(&mut self, weights: Var, stack: Var) -> Result<Var> {
        let (ws, ss) = (self.shape(weights).to_vec(), self.shape(stack).to_vec());
        if ws.len() != 2 || ss.len() != 4 || ws[0] != ss[0] || ws[1] == 0 || ss[3] % ws[1] != 0 {
            return Err(RfnError::shape("scale_stack", &ws, &ss));
        }
        let (batch, n) = (ws[0], ws[1]);
        let (positions, channels) = (ss[1] * ss[2], ss[3] / n);
        let out = kernels::scale_slabs(
            self.value(weights).data(),
            self.value(stack).data(),
            batch,
            positions,
            n,
            channels,
        );
        let value = Tensor::new(&ss, out)?;
        let op = Op::ScaleSlabs { weights, stack, batch, positions, n, channels };
        self.push(value, op, &[weights, stack])
    }

    /// `[B, H, W, n·C]` → `[B, H, W, C]` across the `n` angle slabs.
    pub fn resume(&mut self, stack: Var, n: usize, mode: ResumeMode) -> Result<Var> {
        let ss = self.shape(stack).to_vec();
        if n == 0 {
            return Err(RfnError::invalid("resume: empty stack"));
        }
        if ss.len() != 4 || ss[3] % n != 0 {
            return Err(RfnError::shape("resume", &ss, &[n]));
        }
        let (rows, channels) = (ss[0] * ss[1] * ss[2], ss[3] / n);
        let (out, argmax) = kernels::resume(self.value(stack).data(), rows, n, channels, mode);
        let value = Tensor::new(&[ss[0], ss[1], ss[2], channels], out)?;
        let op = Op::Resume { stack, mode, argmax, rows, n, channels };
        self.push(value, op, &[stack])
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against class indices.
    pub fn classification_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(RfnError::shape("classification_loss", &ls, &[labels.len()]));
        }
        let (rows, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(RfnError::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let data = self.value(logits).data();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * k..(r + 1) * k];
            total += kernels::log_sum_exp(row) - row[label];
        }
        let probs = kernels::softmax_rows(data, rows, k);
        let value = Tensor::scalar(total / T::lit(rows as f64));
        let op = Op::SoftmaxXent { logits, labels: labels.to_vec(), probs };
        self.push(value, op, &[logits])
    }

    /// Mean smooth-L1 of `pred − target` over all elements.
    pub fn regression_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.ensure_shape("regression_loss", target.shape())?;
        if p.is_empty() {
            return Err(RfnError::invalid("regression_loss: empty input"));
        }
        let diff: Vec<T> = p.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let half = T::lit(0.5);
        let total: T = diff
            .iter()
            .map(|&x| if x.abs() < T::one() { half * x * x } else { x.abs() - half })
            .sum();
        let value = Tensor::scalar(total / T::lit(diff.len() as f64));
        self.push(value, Op::SmoothL1 { pred, diff }, &[pred])
    }

    /// Per-sample RBF term between L2-normalized rows of `a` and `b`
    /// (leading axis is the batch). Returns a `[B]` node.
    pub fn invariance_pair(&mut self, a: Var, b: Var, sigma: T, form: KernelForm) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_ != bs || as_.is_empty() {
            return Err(RfnError::shape("invariance_distance", &as_, &bs));
        }
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(RfnError::invalid(format!("RBF bandwidth must be positive, got {sigma}")));
        }
        let batch = as_[0];
        let dim = as_[1..].iter().product::<usize>();
        let (a_hat, a_norm) = normalize_rows(self.value(a).data(), batch, dim)?;
        let (b_hat, b_norm) = normalize_rows(self.value(b).data(), batch, dim)?;
        let two = T::lit(2.0);
        let mut kernel = Vec::with_capacity(batch);
        let mut out = Vec::with_capacity(batch);
        for r in 0..batch {
            let sq: T = a_hat[r * dim..(r + 1) * dim]
                .iter()
                .zip(&b_hat[r * dim..(r + 1) * dim])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            let kv = (-sq / (two * sigma * sigma)).exp();
            kernel.push(kv);
            out.push(match form {
                KernelForm::Distance => two * (T::one() - kv),
                KernelForm::Similarity => kv,
            });
        }
        let value = Tensor::new(&[batch], out)?;
        let op = Op::InvariancePair(Box::new(InvariancePair {
            a,
            b,
            sigma,
            form,
            dim,
            a_hat,
            b_hat,
            a_norm,
            b_norm,
            kernel,
        }));
        self.push(value, op, &[a, b])
    }

    /// Runs the backward pass from the scalar node `loss`, replacing any
    /// previously stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(RfnError::invalid(format!(
                "backward needs a scalar target, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(&shape, delta).expect("gradient shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) {
        let gd = g.data();
        // Each arm computes input deltas from borrowed state, then accumulates.
        let mut deltas: Vec<(Var, Vec<T>)> = Vec::with_capacity(2);
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ga, gb) = kernels::matmul_backward(self.value(a).data(), self.value(b).data(), gd, m, k, n);
                deltas.push((a, ga));
                deltas.push((b, gb));
            }
            &Op::Conv2d { x, kernel, ref geom } => {
                let (gx, gk) =
                    kernels::conv2d_backward(self.value(x).data(), self.value(kernel).data(), gd, geom);
                if self.wants(x) {
                    deltas.push((x, gx));
                }
                deltas.push((kernel, gk));
            }
            &Op::AddBias { x, bias } => {
                let d = self.value(bias).len();
                let mut gb = vec![T::zero(); d];
                for row in gd.chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                deltas.push((x, gd.to_vec()));
                deltas.push((bias, gb));
            }
            &Op::Activation { x, kind } => {
                let out = node.value.data();
                let gx = match kind {
                    Activation::Relu => gd
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => gd
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect(),
                };
                deltas.push((x, gx));
            }
            &Op::Add { a, b } => {
                deltas.push((a, gd.to_vec()));
                deltas.push((b, gd.to_vec()));
            }
            &Op::Scale { x, factor } => {
                deltas.push((x, gd.iter().map(|&v| v * factor).collect()));
            }
            &Op::Sum { x } => {
                deltas.push((x, vec![gd[0]; self.value(x).len()]));
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                deltas.push((x, vec![gd[0] / T::lit(n as f64); n]));
            }
            &Op::Reshape { x } => deltas.push((x, gd.to_vec())),
            Op::Resample { x, maps, batch, channels } => {
                deltas.push((*x, kernels::resample_stack_backward(gd, *batch, *channels, maps)));
            }
            Op::GlobalPool { x, mode, argmax, batch, positions, channels } => {
                let gx = kernels::global_pool_backward(gd, argmax, *batch, *positions, *channels, *mode);
                deltas.push((*x, gx));
            }
            &Op::ScaleSlabs { weights, stack, batch, positions, n, channels } => {
                let (gw, gs) = kernels::scale_slabs_backward(
                    self.value(weights).data(),
                    self.value(stack).data(),
                    gd,
                    batch,
                    positions,
                    n,
                    channels,
                );
                deltas.push((weights, gw));
                deltas.push((stack, gs));
            }
            Op::Resume { stack, mode, argmax, rows, n, channels } => {
                let gs = kernels::resume_backward(gd, argmax, *rows, *n, *channels, *mode);
                deltas.push((*stack, gs));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let rows = labels.len();
                let k = probs.len() / rows;
                let scale = gd[0] / T::lit(rows as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * k + l] -= scale;
                }
                deltas.push((*logits, gl));
            }
            Op::SmoothL1 { pred, diff } => {
                let scale = gd[0] / T::lit(diff.len() as f64);
                let gp = diff
                    .iter()
                    .map(|&x| {
                        if x.abs() < T::one() {
                            x * scale
                        } else {
                            x.signum() * scale
                        }
                    })
                    .collect();
                deltas.push((*pred, gp));
            }
            Op::InvariancePair(p) => {
                let (ga, gb) = p.backward(gd);
                deltas.push((p.a, ga));
                deltas.push((p.b, gb));
            }
        }
        for (v, d) in deltas {
            self.accumulate(v, d);
        }
    }
}

impl<T: Real> InvariancePair<T> {
    fn backward(&self, grad: &[T]) -> (Vec<T>, Vec<T>) {
        let dim = self.dim;
        let batch = self.kernel.len();
        let mut ga = vec![T::zero(); batch * dim];
        let mut gb = vec![T::zero(); batch * dim];
        let s2 = self.sigma * self.sigma;
        for r in 0..batch {
            let kv = self.kernel[r];
            // d(term)/d(â) = coeff · (â − b̂); d(term)/d(b̂) = −coeff · (â − b̂).
            let coeff = match self.form {
                KernelForm::Distance => T::lit(2.0) * kv / s2,
                KernelForm::Similarity => -kv / s2,
            } * grad[r];
            let ah = &self.a_hat[r * dim..(r + 1) * dim];
            let bh = &self.b_hat[r * dim..(r + 1) * dim];
            let d_ahat: Vec<T> = ah.iter().zip(bh).map(|(&x, &y)| coeff * (x - y)).collect();
            let d_bhat: Vec<T> = d_ahat.iter().map(|&v| -v).collect();
            project_normalization(ah, self.a_norm[r], &d_ahat, &mut ga[r * dim..(r + 1) * dim]);
            project_normalization(bh, self.b_norm[r], &d_bhat, &mut gb[r * dim..(r + 1) * dim]);
        }
        (ga, gb)
    }
}

/// Chain rule through `x ↦ x / ‖x‖`: `(g − x̂ (x̂·g)) / ‖x‖`.
fn project_normalization<T: Real>(unit: &[T], norm: T, g: &[T], out: &mut [T]) {
    let dot: T = unit.iter().zip(g).map(|(&u, &v)| u * v).sum();
    for ((o, &u), &v) in out.iter_mut().zip(unit).zip(g) {
        *o = (v - u * dot) / norm;
    }
}

pub(crate) fn normalize_rows<T: Real>(x: &[T], rows: usize, dim: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(RfnError::DegenerateNormalization);
        }
        unit.extend(row.iter().map(|&v| v / norm));
        norms.push(norm);
    }
    Ok((unit, norms))
}
