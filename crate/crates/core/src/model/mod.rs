//! Vision Transformer definition: configuration, weights, parameter and FLOP
//! accounting.
//!
//! Linears are addressed by stable dotted names:
//!
//! | name                                          | shape (out x in)       |
//! |-----------------------------------------------|------------------------|
//! | `embeddings.patch_embeddings`                 | hidden x (C p p)       |
//! | `encoder.layer.{l}.attention.query`/`key`/`value` | hidden x hidden    |
//! | `encoder.layer.{l}.attention.output.dense`    | hidden x hidden        |
//! | `encoder.layer.{l}.intermediate.dense`        | mlp_l x hidden         |
//! | `encoder.layer.{l}.output.dense`              | hidden x mlp_l         |
//! | `classifier`                                  | classes x hidden       |

mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizedLinear;
use crate::rng::Rng;
use crate::tensor::{self, Dtype, Tensor};

pub use forward::{patchify, ForwardObserver};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

pub const PATCH_EMBED: &str = "embeddings.patch_embeddings";
pub const CLASSIFIER: &str = "classifier";

pub fn query_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.attention.query")
}
pub fn key_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.attention.key")
}
pub fn value_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.attention.value")
}
pub fn attn_output_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.attention.output.dense")
}
pub fn intermediate_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.intermediate.dense")
}
pub fn output_name(layer: usize) -> String {
    format!("encoder.layer.{layer}.output.dense")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub num_heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_channels: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// ViT-Huge/14 at 224 px with a 1000-way head.
    pub const fn vit_huge() -> Self {
        ModelConfig {
            num_layers: 32,
            hidden_size: 1280,
            mlp_size: 5120,
            num_heads: 16,
            image_size: 224,
            patch_size: 14,
            num_channels: 3,
            num_classes: 1000,
        }
    }

    /// Small model for native 32x32 CIFAR-10 images.
    pub const fn vit_toy() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_size: 64,
            mlp_size: 256,
            num_heads: 4,
            image_size: 32,
            patch_size: 4,
            num_channels: 3,
            num_classes: 10,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-huge" => Ok(Self::vit_huge()),
            "vit-toy" => Ok(Self::vit_toy()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected vit-toy or vit-huge)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("mlp_size", self.mlp_size),
            ("num_heads", self.num_heads),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("num_channels", self.num_channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Tokens per image including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.num_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form parameter count of the unpruned model.
    pub fn param_count(&self) -> u64 {
        let h = self.hidden_size as u64;
        let m = self.mlp_size as u64;
        let patch = self.patch_dim() as u64 * h + h;
        let cls = h;
        let pos = self.seq_len() as u64 * h;
        let per_layer = 2 * h + 4 * (h * h + h) + 2 * h + (h * m + m) + (m * h + h);
        let final_norm = 2 * h;
        let head = h * self.num_classes as u64 + self.num_classes as u64;
        patch + cls + pos + self.num_layers as u64 * per_layer + final_norm + head
    }
}

/// Float linear layer (`y = x W^T + b`) stored as F32 or F16.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[out, _] = weight.shape() else {
            return Err(Error::Dimension(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {out} output rows",
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn dtype(&self) -> Dtype {
        self.weight.dtype()
    }

    /// F32 layers compute in f32. F16 layers round their input to binary16,
    /// accumulate in f32, and store the output as an F16 tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match (self.weight.dtype(), self.bias.dtype()) {
            (Dtype::F32, Dtype::F32) => tensor::linear(x, &self.weight, Some(&self.bias)),
            (Dtype::F16, Dtype::F16) => {
                let xh = tensor::cast(x, Dtype::F16)?;
                let y = tensor::linear(&xh, &self.weight, Some(&self.bias))?;
                tensor::cast(&y, Dtype::F16)
            }
            (w, b) => Err(Error::PrecisionState(format!(
                "linear layer holds {w} weights with {b} bias; expected both f32 or both f16"
            ))),
        }
    }
}

/// A linear slot in the model: float or INT8-quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Float(Linear),
    Quantized(QuantizedLinear),
}

impl Projection {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Projection::Float(l) => l.forward(x),
            Projection::Quantized(q) => q.forward(x),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Projection::Float(l) => l.out_features(),
            Projection::Quantized(q) => q.out_features(),
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Projection::Float(l) => l.in_features(),
            Projection::Quantized(q) => q.in_features(),
        }
    }

    /// Dtype of the weight payload.
    pub fn weight_dtype(&self) -> Dtype {
        match self {
            Projection::Float(l) => l.dtype(),
            Projection::Quantized(_) => Dtype::I8,
        }
    }

    /// Dtype in which this layer's output activation is stored.
    pub fn activation_dtype(&self) -> Dtype {
        match self {
            Projection::Float(l) => l.dtype(),
            Projection::Quantized(_) => Dtype::F32,
        }
    }

    /// Bytes of every stored tensor, quantization parameters included.
    pub fn byte_size(&self) -> usize {
        match self {
            Projection::Float(l) => l.weight.byte_size() + l.bias.byte_size(),
            Projection::Quantized(q) => q.byte_size(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Projection::Float(l) => l.weight.len() + l.bias.len(),
            Projection::Quantized(q) => q.q_weight.len() + q.bias.len(),
        }
    }

    pub fn as_float(&self) -> Option<&Linear> {
        match self {
            Projection::Float(l) => Some(l),
            Projection::Quantized(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn identity(width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::full(vec![width], 1.0)?,
            beta: Tensor::zeros(vec![width])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layernorm(x, &self.gamma, &self.beta, tensor::LAYERNORM_EPS)
    }

    pub fn byte_size(&self) -> usize {
        self.gamma.byte_size() + self.beta.byte_size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm_before: LayerNorm,
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub attn_output: Projection,
    pub norm_after: LayerNorm,
    pub intermediate: Projection,
    pub output: Projection,
    /// Original channel index of each surviving MLP channel, ascending.
    pub mlp_channels: Vec<usize>,
}

impl EncoderLayer {
    pub fn mlp_size(&self) -> usize {
        self.intermediate.out_features()
    }

    fn projections(&self) -> [&Projection; 6] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.attn_output,
            &self.intermediate,
            &self.output,
        ]
    }

    fn byte_size(&self) -> usize {
        self.norm_before.byte_size()
            + self.norm_after.byte_size()
            + self.projections().iter().map(|p| p.byte_size()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    pub config: ModelConfig,
    pub patch_embed: Projection,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Projection,
}

fn normal_linear(rng: &mut Rng, out: usize, inp: usize) -> Result<Projection> {
    let weight = Tensor::from_f32(vec![out, inp], rng.normal_vec(out * inp, INIT_STD))?;
    let bias = Tensor::from_f32(vec![out], rng.normal_vec(out, INIT_STD))?;
    Ok(Projection::Float(Linear::new(weight, bias)?))
}

impl VitModel {
    /// Deterministic random initialization.
    ///
    /// Every linear weight and bias, the class token and the position
    /// embeddings are drawn from N(0, 0.02^2) with [`Rng`] seeded by `seed`, in
    /// this order: patch embedding (weight, bias), class token, position
    /// embeddings, then per layer query, key, value, attention output,
    /// intermediate, output (weight then bias each), then the classifier.
    /// Layer norms start at gamma = 1, beta = 0 and consume no draws.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let h = config.hidden_size;
        let m = config.mlp_size;
        let patch_embed = normal_linear(&mut rng, h, config.patch_dim())?;
        let cls_token = Tensor::from_f32(vec![h], rng.normal_vec(h, INIT_STD))?;
        let t = config.seq_len();
        let pos_embed = Tensor::from_f32(vec![t, h], rng.normal_vec(t * h, INIT_STD))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(EncoderLayer {
                norm_before: LayerNorm::identity(h)?,
                query: normal_linear(&mut rng, h, h)?,
                key: normal_linear(&mut rng, h, h)?,
                value: normal_linear(&mut rng, h, h)?,
                attn_output: normal_linear(&mut rng, h, h)?,
                norm_after: LayerNorm::identity(h)?,
                intermediate: normal_linear(&mut rng, m, h)?,
                output: normal_linear(&mut rng, h, m)?,
                mlp_channels: (0..m).collect(),
            });
        }
        let head = normal_linear(&mut rng, config.num_classes, h)?;
        Ok(VitModel {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_norm: LayerNorm::identity(h)?,
            head,
        })
    }

    /// All linears in execution order with their stable names.
    pub fn projections(&self) -> Vec<(String, &Projection)> {
        let mut out = vec![(PATCH_EMBED.to_string(), &self.patch_embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((query_name(l), &layer.query));
            out.push((key_name(l), &layer.key));
            out.push((value_name(l), &layer.value));
            out.push((attn_output_name(l), &layer.attn_output));
            out.push((intermediate_name(l), &layer.intermediate));
            out.push((output_name(l), &layer.output));
        }
        out.push((CLASSIFIER.to_string(), &self.head));
        out
    }

    pub fn projections_mut(&mut self) -> Vec<(String, &mut Projection)> {
        let mut out = vec![(PATCH_EMBED.to_string(), &mut self.patch_embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((query_name(l), &mut layer.query));
            out.push((key_name(l), &mut layer.key));
            out.push((value_name(l), &mut layer.value));
            out.push((attn_output_name(l), &mut layer.attn_output));
            out.push((intermediate_name(l), &mut layer.intermediate));
            out.push((output_name(l), &mut layer.output));
        }
        out.push((CLASSIFIER.to_string(), &mut self.head));
        out
    }

    pub fn projection(&self, name: &str) -> Result<&Projection> {
        self.projections()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// Current MLP width of every layer.
    pub fn mlp_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(EncoderLayer::mlp_size).collect()
    }

    /// Exact number of stored parameters: every linear weight and bias, layer
    /// norm parameters, class token and position embeddings.
    pub fn count_params(&self) -> u64 {
        let norms = |n: &LayerNorm| (n.gamma.len() + n.beta.len()) as u64;
        let mut total = self.cls_token.len() as u64 + self.pos_embed.len() as u64;
        total += norms(&self.final_norm);
        total += self.projections().iter().map(|(_, p)| p.param_count() as u64).sum::<u64>();
        total += self
            .layers
            .iter()
            .map(|l| norms(&l.norm_before) + norms(&l.norm_after))
            .sum::<u64>();
        total
    }

    /// Bytes of all stored parameter tensors at their current dtypes.
    pub fn weight_bytes(&self) -> u64 {
        let mut total = self.patch_embed.byte_size()
            + self.cls_token.byte_size()
            + self.pos_embed.byte_size()
            + self.final_norm.byte_size()
            + self.head.byte_size();
        total += self.layers.iter().map(EncoderLayer::byte_size).sum::<usize>();
        total as u64
    }

    /// Multiply-add count (2 per MAC) of one forward pass over `batch` images.
    pub fn count_flops(&self, batch: usize) -> u64 {
        let c = &self.config;
        let b = batch as u64;
        let h = c.hidden_size as u64;
        let patches = c.num_patches() as u64;
        let mut total = 2 * b * patches * c.patch_dim() as u64 * h;
        for layer in &self.layers {
            total += attention_flops(c, batch);
            total += mlp_flops(c, layer.mlp_size(), batch);
        }
        total + 2 * b * h * c.num_classes as u64
    }

    /// Returns the config error if weights disagree with `config`.
    pub fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let h = c.hidden_size;
        let expect = |what: &str, p: &Projection, out: usize, inp: usize| -> Result<()> {
            if p.out_features() != out || p.in_features() != inp {
                return Err(Error::Dimension(format!(
                    "{what} is {}x{}, expected {out}x{inp}",
                    p.out_features(),
                    p.in_features()
                )));
            }
            Ok(())
        };
        expect(PATCH_EMBED, &self.patch_embed, h, c.patch_dim())?;
        expect(CLASSIFIER, &self.head, c.num_classes, h)?;
        if self.cls_token.shape() != [h] || self.pos_embed.shape() != [c.seq_len(), h] {
            return Err(Error::Dimension("embedding tensors do not match config".into()));
        }
        if self.layers.len() != c.num_layers {
            return Err(Error::Dimension(format!(
                "model has {} layers, config says {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let m = layer.mlp_size();
            expect(&query_name(l), &layer.query, h, h)?;
            expect(&key_name(l), &layer.key, h, h)?;
            expect(&value_name(l), &layer.value, h, h)?;
            expect(&attn_output_name(l), &layer.attn_output, h, h)?;
            expect(&intermediate_name(l), &layer.intermediate, m, h)?;
            expect(&output_name(l), &layer.output, h, m)?;
            if layer.mlp_channels.len() != m
                || layer.mlp_channels.windows(2).any(|w| w[0] >= w[1])
                || layer.mlp_channels.last().is_some_and(|&i| i >= c.mlp_size)
            {
                return Err(Error::Dimension(format!(
                    "layer {l} channel map is inconsistent with its MLP width {m}"
                )));
            }
        }
        Ok(())
    }
}

/// FLOPs of one attention sub-block: q/k/v/output projections plus score and
/// context products.
pub fn attention_flops(c: &ModelConfig, batch: usize) -> u64 {
    let b = batch as u64;
    let h = c.hidden_size as u64;
    let t = c.seq_len() as u64;
    let projections = 4 * 2 * b * t * h * h;
    let scores = 2 * b * t * t * h;
    let context = 2 * b * t * t * h;
    projections + scores + context
}

/// FLOPs of one MLP sub-block of width `mlp_size`.
pub fn mlp_flops(c: &ModelConfig, mlp_size: usize, batch: usize) -> u64 {
    2 * 2 * batch as u64 * c.seq_len() as u64 * c.hidden_size as u64 * mlp_size as u64
}

/// Converts an activation to the storage dtype of the layer that produced it.
pub(crate) fn store_as(dtype: Dtype, t: Tensor) -> Result<Tensor> {
    match dtype {
        Dtype::F16 => tensor::cast(&t, Dtype::F16),
        _ => Ok(t),
    }
}
