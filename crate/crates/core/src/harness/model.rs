//! Conv backbone + neck (RFN block or identity) + RI classifier and RS
//! orientation regressor.

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RfnError};
use crate::numcore::init::{truncated_normal, InitScale};
use crate::numcore::{Graph, ParamStore, PlaneMap, Real, Tensor, Var};
use crate::rfn::{RfnBlock, RfnConfig, RfnParams};
use crate::rng::Rng;
use crate::rotation::plane_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neck {
    /// The rotated feature block; RI feeds the classifier, RS the regressor.
    Rfn,
    /// Pass-through baseline: the backbone output feeds both heads.
    Identity,
}

/// Architecture knobs of the model around the block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub neck: Neck,
    /// Output channels of each conv stage.
    pub widths: Vec<usize>,
    /// Stride of each conv stage.
    pub strides: Vec<usize>,
    /// Square kernel extent shared by all stages.
    pub kernel: usize,
    pub backbone_init: InitScale,
    pub gate_init: InitScale,
    pub head_init: InitScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            neck: Neck::Rfn,
            widths: vec![8, 16],
            strides: vec![2, 2],
            kernel: 3,
            backbone_init: InitScale::He,
            gate_init: InitScale::Fixed(0.01),
            head_init: InitScale::Fixed(0.01),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial extent of the stage output.
    pub side: usize,
}

/// Fully resolved architecture.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub image_size: usize,
    pub classes: usize,
    pub stages: Vec<Stage>,
    pub neck: Neck,
    pub rfn: RfnConfig,
    pub init: ModelConfig,
    /// Number of stages before the neck.
    pub insertion: usize,
    block: Option<RfnBlock>,
    quarter_turn: Arc<[PlaneMap]>,
    image_maps: Vec<Arc<[PlaneMap]>>,
    feature_maps: Vec<Arc<[PlaneMap]>>,
}

/// Nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// Neck input `[B, S, S, C]`.
    pub features: Var,
    pub ri: Var,
    pub rs: Var,
    /// Gate output `[B, n]`; `None` for the identity neck.
    pub weights: Option<Var>,
    /// `[B, K]`.
    pub logits: Var,
    /// `[B, 2]`, predicted `(sin θ, cos θ)`.
    pub orientation: Var,
}

impl ModelSpec {
    pub fn new(config: &ModelConfig, rfn: &RfnConfig, image_size: usize, classes: usize) -> Result<Self> {
        if config.widths.is_empty() {
            return Err(RfnError::invalid("model.widths needs at least one stage"));
        }
        if config.widths.len() != config.strides.len() {
            return Err(RfnError::invalid(format!(
                "model.widths has {} stages but model.strides has {}",
                config.widths.len(),
                config.strides.len()
            )));
        }
        if config.kernel == 0 || config.widths.contains(&0) || config.strides.contains(&0) {
            return Err(RfnError::invalid("kernel, widths and strides must be positive"));
        }
        if classes < 2 {
            return Err(RfnError::invalid(format!("need at least two classes, got {classes}")));
        }
        let mut stages = Vec::with_capacity(config.widths.len());
        let (mut side, mut cin) = (image_size, 1);
        for (&cout, &stride) in config.widths.iter().zip(&config.strides) {
            let pad = (config.kernel + 1).saturating_sub(stride) / 2;
            if side + 2 * pad < config.kernel {
                return Err(RfnError::invalid(format!(
                    "feature map of side {side} is too small for a {k}×{k} kernel",
                    k = config.kernel
                )));
            }
            let out = (side + 2 * pad - config.kernel) / stride + 1;
            stages.push(Stage {
                cin,
                cout,
                kernel: config.kernel,
                stride,
                pad,
                side: out,
            });
            side = out;
            cin = cout;
        }
        let insertion = rfn.insertion_stage.depth();
        if insertion > stages.len() {
            return Err(RfnError::invalid(format!(
                "insertion after stage {insertion} needs at least {insertion} backbone stages, have {}",
                stages.len()
            )));
        }
        let at = stages[insertion - 1];
        let block = match config.neck {
            Neck::Rfn => Some(RfnBlock::new(rfn.clone(), at.cout, at.side)?),
            Neck::Identity => None,
        };
        let angles = crate::rotation::AngleSet::new(rfn.n)?;
        let per_angle = |s: usize| -> Vec<Arc<[PlaneMap]>> {
            angles.angles().iter().map(|&a| Arc::from(vec![plane_map(s, a)])).collect()
        };
        Ok(Self {
            image_size,
            classes,
            neck: config.neck,
            rfn: rfn.clone(),
            init: config.clone(),
            insertion,
            block,
            quarter_turn: Arc::from(vec![plane_map(at.side, std::f64::consts::FRAC_PI_2)]),
            image_maps: per_angle(image_size),
            feature_maps: per_angle(at.side),
            stages,
        })
    }

    pub fn block(&self) -> Option<&RfnBlock> {
        self.block.as_ref()
    }

    /// `(side, channels)` of the neck input.
    pub fn neck_shape(&self) -> (usize, usize) {
        let s = self.stages[self.insertion - 1];
        (s.side, s.cout)
    }

    fn head_inputs(&self) -> usize {
        let last = self.stages.last().expect("at least one stage");
        last.side * last.side * last.cout
    }

    /// Every parameter in a fixed order with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), vec![s.kernel, s.kernel, s.cin, s.cout]));
            out.push((format!("backbone.{i}.bias"), vec![s.cout]));
        }
        if let Some(block) = &self.block {
            let shapes = block.config.param_shapes(block.channels).expect("validated");
            for (name, shape) in shapes {
                out.push((format!("rfn.{name}"), shape));
            }
        }
        let d = self.head_inputs();
        out.push(("cls_head.weight".into(), vec![d, self.classes]));
        out.push(("cls_head.bias".into(), vec![self.classes]));
        out.push(("reg_head.weight".into(), vec![d, 2]));
        out.push(("reg_head.bias".into(), vec![2]));
        out
    }

    pub fn param_total(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Parameters of the block alone (0 for the identity neck).
    pub fn rfn_param_count(&self) -> usize {
        self.block.as_ref().map_or(0, RfnBlock::param_count)
    }

    /// Truncated-normal weights, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore<f32> {
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let scale = if name.starts_with("backbone.") {
                        self.init.backbone_init
                    } else if name.starts_with("rfn.") {
                        self.init.gate_init
                    } else {
                        self.init.head_init
                    };
                    let fan_in = shape[..shape.len() - 1].iter().product();
                    truncated_normal(&shape, scale.std(fan_in), rng)
                };
                (name, t)
            })
            .collect()
    }

    /// Fails with an architecture mismatch unless `params` has exactly this
    /// model's names and shapes, in order.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != params.len() {
            return Err(RfnError::ArchitectureMismatch(format!(
                "model has {} parameter tensors, checkpoint has {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(params) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(RfnError::ArchitectureMismatch(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter on the graph (as trainable leaves when
    /// `trainable`), returning name → node.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamStore<T>, trainable: bool) -> IndexMap<String, Var> {
        params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect()
    }

    fn stage<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, i: usize, x: Var) -> Result<Var> {
        let s = self.stages[i];
        let y = g.conv2d(x, vars[&format!("backbone.{i}.kernel")], s.stride, s.pad)?;
        let y = g.add_bias(y, vars[&format!("backbone.{i}.bias")])?;
        g.relu(y)
    }

    /// Backbone stages up to the neck; `images` is `[B, S, S, 1]`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, images: Var) -> Result<Var> {
        let mut h = images;
        for i in 0..self.insertion {
            h = self.stage(g, vars, i, h)?;
        }
        Ok(h)
    }

    /// `(ri, rs, weights)` of the neck applied to features `x`.
    pub fn neck<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &IndexMap<String, Var>,
        x: Var,
    ) -> Result<(Var, Var, Option<Var>)> {
        match &self.block {
            Some(block) => {
                let gate = crate::rfn::GateVars {
                    w1: vars["rfn.w1"],
                    w2: vars.get("rfn.w2").copied(),
                };
                let nodes = block.forward_graph(g, x, &gate)?;
                Ok((nodes.ri, nodes.rs, Some(nodes.weights)))
            }
            None => Ok((x, x, None)),
        }
    }

    /// The RI map of features `x` (the quantity the invariance loss compares).
    pub fn ri<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, x: Var) -> Result<Var> {
        Ok(self.neck(g, vars, x)?.0)
    }

    fn tail<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in self.insertion..self.stages.len() {
            h = self.stage(g, vars, i, h)?;
        }
        let batch = g.shape(h)[0];
        g.reshape(h, &[batch, self.head_inputs()])
    }

    fn head<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, prefix: &str, x: Var) -> Result<Var> {
        let y = g.linear(x, vars[&format!("{prefix}.weight")])?;
        g.add_bias(y, vars[&format!("{prefix}.bias")])
    }

    /// Full forward pass on `[B, S, S, 1]` images.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &IndexMap<String, Var>, images: Var) -> Result<ForwardNodes> {
        let features = self.features(g, vars, images)?;
        let (ri, rs, weights) = self.neck(g, vars, features)?;
        let cls_in = self.tail(g, vars, ri)?;
        let reg_in = if ri == rs { cls_in } else { self.tail(g, vars, rs)? };
        Ok(ForwardNodes {
            features,
            ri,
            rs,
            weights,
            logits: self.head(g, vars, "cls_head", cls_in)?,
            orientation: self.head(g, vars, "reg_head", reg_in)?,
        })
    }

    /// Single-angle map rotating neck-input features by `θ_k`.
    pub fn feature_rotation(&self, k: usize) -> Arc<[PlaneMap]> {
        self.feature_maps[k].clone()
    }

    /// Single-angle map rotating input images by `θ_k`.
    pub fn image_rotation(&self, k: usize) -> Arc<[PlaneMap]> {
        self.image_maps[k].clone()
    }

    /// Quarter-turn map at the neck resolution.
    pub fn quarter_turn(&self) -> Arc<[PlaneMap]> {
        self.quarter_turn.clone()
    }
}

/// Converts the block's parameters out of a store, if the model has a block.
pub fn rfn_params<T: Real>(params: &ParamStore<T>) -> Option<RfnParams<T>> {
    params.get("rfn.w1").map(|w1| RfnParams {
        w1: w1.clone(),
        w2: params.get("rfn.w2").cloned(),
    })
}
