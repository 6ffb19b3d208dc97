//! Compact convolutional backbone shared by both input scales, and the fusion head.
//!
//! Parameter schema (blocks numbered from 1):
//!
//! | name             | shape                         |
//! |------------------|-------------------------------|
//! | `block{i}.weight`| `[C_i, C_{i-1}, 3, 3]` (C_0 = 3) |
//! | `block{i}.bias`  | `[C_i]`                       |
//! | `hidden.weight`  | `[H, 2F]` (multi) / `[H, F]` (single) |
//! | `hidden.bias`    | `[H]`                         |
//! | `output.weight`  | `[3, H]`                      |
//! | `output.bias`    | `[3]`                         |
//!
//! where `F` is the last block width and `H` the hidden width.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::param::{ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};

pub const INPUT_CHANNELS: usize = 3;
pub const NUM_OUTPUTS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input must be [3,{expected},{expected}], got {found:?}")]
    InputShape { expected: usize, found: Vec<usize> },
    #[error("model is {found} but {expected} input was supplied")]
    ModeMismatch { expected: Mode, found: Mode },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    MultiScale,
    SingleScale,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::MultiScale => "multi_scale",
            Mode::SingleScale => "single_scale",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 32, 64],
            side: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() < 3 {
            return Err(ModelError::Config(format!(
                "need at least 3 blocks, got {}",
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::Config("block widths must be positive".into()));
        }
        let stride = 1usize << self.widths.len();
        if self.side == 0 || !self.side.is_multiple_of(stride) {
            return Err(ModelError::Config(format!(
                "side {} is not divisible by 2^{} = {stride}",
                self.side,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated backbone")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hidden: 32,
            mode: Mode::MultiScale,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.hidden == 0 {
            return Err(ModelError::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Width of the vector fed to the hidden layer.
    pub fn head_input_width(&self) -> usize {
        let f = self.backbone.feature_width();
        match self.mode {
            Mode::MultiScale => 2 * f,
            Mode::SingleScale => f,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = INPUT_CHANNELS;
        for (i, &c) in self.backbone.widths.iter().enumerate() {
            out.push((format!("block{}.weight", i + 1), vec![c, c_in, 3, 3]));
            out.push((format!("block{}.bias", i + 1), vec![c]));
            c_in = c;
        }
        out.push(("hidden.weight".into(), vec![self.hidden, self.head_input_width()]));
        out.push(("hidden.bias".into(), vec![self.hidden]));
        out.push(("output.weight".into(), vec![NUM_OUTPUTS, self.hidden]));
        out.push(("output.bias".into(), vec![NUM_OUTPUTS]));
        out
    }
}

/// Staged fine-tuning: stage 1 trains only the head, stage 2 also the last
/// `unfreeze_blocks` backbone blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeStage {
    Stage1,
    Stage2 { unfreeze_blocks: usize },
}

impl FreezeStage {
    pub const STAGE2_DEFAULT: FreezeStage = FreezeStage::Stage2 { unfreeze_blocks: 2 };

    pub fn tag(self) -> &'static str {
        match self {
            FreezeStage::Stage1 => "stage1",
            FreezeStage::Stage2 { .. } => "stage2",
        }
    }
}

/// The model input for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Multi { coarse: Tensor, fine: Tensor },
    Single(Tensor),
}

impl ModelInput {
    pub fn mode(&self) -> Mode {
        match self {
            ModelInput::Multi { .. } => Mode::MultiScale,
            ModelInput::Single(_) => Mode::SingleScale,
        }
    }

    /// Applies `f` to every view.
    pub fn try_map<E>(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor, E>) -> Result<ModelInput, E> {
        Ok(match self {
            ModelInput::Multi { coarse, fine } => ModelInput::Multi {
                coarse: f(coarse)?,
                fine: f(fine)?,
            },
            ModelInput::Single(t) => ModelInput::Single(f(t)?),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    params: ParamSet,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.schema() {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
                    [o, i] => (*i, *o),
                    _ => unreachable!("weights are 2-D or 4-D"),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| rng.random_range(-a..a)).collect();
                Tensor::new(shape, data)?
            };
            params.push(name, value)?;
        }
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored tensors, checking them against the schema.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let schema = config.schema();
        if schema.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                schema.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in schema.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {:?} {:?} does not match schema {name:?} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.config.backbone.widths.len()
    }

    fn block(&self, i: usize) -> Layer {
        Layer {
            weight: ParamId(2 * i),
            bias: ParamId(2 * i + 1),
        }
    }

    fn hidden(&self) -> Layer {
        self.block(self.num_blocks())
    }

    fn output(&self) -> Layer {
        self.block(self.num_blocks() + 1)
    }

    /// Names of the parameters belonging to backbone block `i` (1-based).
    pub fn block_param_names(&self, i: usize) -> [String; 2] {
        [format!("block{i}.weight"), format!("block{i}.bias")]
    }

    pub fn set_freeze(&mut self, stage: FreezeStage) {
        let n = self.num_blocks();
        let first_unfrozen = match stage {
            FreezeStage::Stage1 => n,
            FreezeStage::Stage2 { unfreeze_blocks } => n.saturating_sub(unfreeze_blocks),
        };
        for (i, p) in self.params.iter_mut().enumerate() {
            let block = i / 2;
            p.trainable = block >= first_unfrozen;
        }
    }

    fn check_view(&self, t: &Tensor) -> Result<(), ModelError> {
        let s = self.config.backbone.side;
        if t.shape() != [INPUT_CHANNELS, s, s] {
            return Err(ModelError::InputShape {
                expected: s,
                found: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        if input.mode() != self.mode() {
            return Err(ModelError::ModeMismatch {
                expected: input.mode(),
                found: self.mode(),
            });
        }
        match input {
            ModelInput::Multi { coarse, fine } => {
                self.check_view(coarse)?;
                self.check_view(fine)
            }
            ModelInput::Single(t) => self.check_view(t),
        }
    }

    fn value(&self, id: ParamId) -> &Tensor {
        &self.params.get(id).value
    }

    /// Per block conv → relu → maxpool, then global average pooling.
    pub fn backbone_forward(&self, img: &Tensor) -> Result<Tensor, ModelError> {
        self.check_view(img)?;
        let mut x = img.clone();
        for i in 0..self.num_blocks() {
            let b = self.block(i);
            x = ops::conv2d(&x, self.value(b.weight), self.value(b.bias))?;
            x = ops::relu(&x);
            x = ops::maxpool2(&x)?;
        }
        Ok(ops::global_avg_pool(&x)?)
    }

    /// Input of the hidden layer: `[backbone(coarse), backbone(fine)]` or `backbone(img)`.
    pub fn fused_features(&self, input: &ModelInput) -> Result<Tensor, ModelError> {
        self.check_input(input)?;
        match input {
            ModelInput::Multi { coarse, fine } => {
                let mut v = self.backbone_forward(coarse)?.into_data();
                v.extend(self.backbone_forward(fine)?.into_data());
                Ok(Tensor::from_vec(v))
            }
            ModelInput::Single(t) => self.backbone_forward(t),
        }
    }

    /// Class probabilities (melanoma, seborrheic keratosis, nevus).
    pub fn forward(&self, input: &ModelInput) -> Result<Tensor, ModelError> {
        let feats = self.fused_features(input)?;
        let (h, o) = (self.hidden(), self.output());
        let hidden = ops::relu(&ops::dense(&feats, self.value(h.weight), self.value(h.bias))?);
        let logits = ops::dense(&hidden, self.value(o.weight), self.value(o.bias))?;
        Ok(ops::softmax(&logits)?)
    }

    pub fn multiscale_forward(&self, coarse: &Tensor, fine: &Tensor) -> Result<Tensor, ModelError> {
        self.forward(&ModelInput::Multi {
            coarse: coarse.clone(),
            fine: fine.clone(),
        })
    }

    fn graph_backbone(&self, g: &mut Graph, layers: &[(NodeId, NodeId)], img: &Tensor) -> Result<NodeId, ModelError> {
        let mut x = g.input(img.clone());
        for &(w, b) in layers {
            let c = g.conv2d(x, w, b)?;
            let r = g.relu(c);
            x = g.maxpool2(r)?;
        }
        Ok(g.global_avg_pool(x)?)
    }

    /// Records the forward pass in `g` and returns the probability node. Both
    /// views go through the same parameter nodes.
    pub fn forward_graph(&self, g: &mut Graph, input: &ModelInput) -> Result<NodeId, ModelError> {
        self.check_input(input)?;
        let layers: Vec<(NodeId, NodeId)> = (0..self.num_blocks())
            .map(|i| {
                let b = self.block(i);
                (g.param(&self.params, b.weight), g.param(&self.params, b.bias))
            })
            .collect();
        let feats = match input {
            ModelInput::Multi { coarse, fine } => {
                let a = self.graph_backbone(g, &layers, coarse)?;
                let b = self.graph_backbone(g, &layers, fine)?;
                g.concat(&[a, b])?
            }
            ModelInput::Single(t) => self.graph_backbone(g, &layers, t)?,
        };
        let (h, o) = (self.hidden(), self.output());
        let hw = g.param(&self.params, h.weight);
        let hb = g.param(&self.params, h.bias);
        let ow = g.param(&self.params, o.weight);
        let ob = g.param(&self.params, o.bias);
        let hidden = g.dense(feats, hw, hb)?;
        let hidden = g.relu(hidden);
        let logits = g.dense(hidden, ow, ob)?;
        Ok(g.softmax(logits)?)
    }

    /// Records `mean_i CE(forward(inputs[i]), labels[i])` and returns the loss node.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[(&ModelInput, usize)]) -> Result<NodeId, ModelError> {
        let mut terms = Vec::with_capacity(batch.len());
        for &(input, class) in batch {
            let p = self.forward_graph(g, input)?;
            terms.push(g.cross_entropy(p, class)?);
        }
        Ok(g.mean(&terms)?)
    }
}
