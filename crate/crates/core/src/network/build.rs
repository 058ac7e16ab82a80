//! Network configurations and the layer-sequence builders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Conv, Layer, Linear, Se};
use crate::activations::ActivationKind;
use crate::error::{ensure, Result};
use crate::kaconv::{KaConv, KaConvConfig, OuterMode, ProductMode};
use crate::ops::conv::ConvSpec;
use crate::ops::norm::BatchNorm;
use crate::tensor::Tensor;

/// A four-stage KAConvNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KaConvNetConfig {
    pub blocks: [usize; 4],
    pub channels: [usize; 4],
    #[serde(default = "default_kernel")]
    pub ka_kernel: usize,
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Stages whose blocks use KA layers; the rest use 3×3 convolutions.
    /// An all-false mask also replaces the stem KA layer.
    #[serde(default = "all_stages")]
    pub stage_ka_mask: [bool; 4],
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    /// Hidden width multiple of the block feed-forward; 0 removes it.
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    /// Hidden width of the classifier; 0 gives a single linear layer.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default)]
    pub outer: OuterMode,
    #[serde(default)]
    pub product: ProductMode,
}

fn default_kernel() -> usize {
    3
}
fn default_in_channels() -> usize {
    3
}
fn all_stages() -> [bool; 4] {
    [true; 4]
}
fn default_se_reduction() -> usize {
    16
}
fn default_ffn_ratio() -> usize {
    4
}
fn default_head_hidden() -> usize {
    1280
}
fn default_vgg_classes() -> usize {
    100
}

impl KaConvNetConfig {
    pub fn new(blocks: [usize; 4], channels: [usize; 4], num_classes: usize) -> Self {
        Self {
            blocks,
            channels,
            ka_kernel: default_kernel(),
            num_classes,
            in_channels: default_in_channels(),
            stage_ka_mask: all_stages(),
            se_reduction: default_se_reduction(),
            ffn_ratio: default_ffn_ratio(),
            head_hidden: default_head_hidden(),
            activation: ActivationKind::default(),
            outer: OuterMode::default(),
            product: ProductMode::default(),
        }
    }

    /// `[1,1,3,1]` blocks over `[32,64,128,256]` channels.
    pub fn small(num_classes: usize) -> Self {
        Self::new([1, 1, 3, 1], [32, 64, 128, 256], num_classes)
    }

    /// `[2,2,6,2]` blocks over `[32,64,128,256]` channels.
    pub fn base(num_classes: usize) -> Self {
        Self::new([2, 2, 6, 2], [32, 64, 128, 256], num_classes)
    }

    /// `[2,2,6,2]` blocks over `[48,96,192,384]` channels.
    pub fn large(num_classes: usize) -> Self {
        Self::new([2, 2, 6, 2], [48, 96, 192, 384], num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.blocks.iter().all(|&b| b >= 1), Config, "every stage needs at least one block, got {:?}", self.blocks);
        ensure!(self.channels.iter().all(|&c| c >= 1), Config, "every stage needs at least one channel, got {:?}", self.channels);
        ensure!(self.ka_kernel % 2 == 1, Config, "ka_kernel must be odd, got {}", self.ka_kernel);
        ensure!(self.num_classes >= 1, Config, "num_classes must be at least 1");
        ensure!(self.in_channels >= 1, Config, "in_channels must be at least 1");
        ensure!(self.se_reduction >= 1, Config, "se_reduction must be at least 1");
        for &c in &self.channels {
            ensure!(
                c % self.se_reduction == 0,
                Config,
                "SE reduction {} does not divide stage width {c}",
                self.se_reduction
            );
        }
        Ok(())
    }

    pub fn ka_layer(&self, c_in: usize, c_out: usize, stride: usize) -> KaConvConfig {
        KaConvConfig::new(c_in, c_out, self.ka_kernel, stride)
            .with_activation(self.activation)
            .with_outer(self.outer)
            .with_product(self.product)
    }
}

/// VGG11 with a chosen set of its eight convolutions replaced by KA layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VggConfig {
    /// 1-based indices of the replaced convolutions.
    #[serde(default)]
    pub ka_layers: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default = "default_vgg_classes")]
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Classifier hidden width.
    #[serde(default = "default_vgg_hidden")]
    pub hidden: usize,
    /// Divides every convolution width, for desk-sized training twins of
    /// the full network.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
}

fn default_divisor() -> usize {
    1
}

fn default_vgg_hidden() -> usize {
    4096
}

/// `(c_out, max pool after)` for the eight VGG11 convolutions.
pub const VGG11: [(usize, bool); 8] =
    [(64, true), (128, true), (256, false), (256, true), (512, false), (512, true), (512, false), (512, true)];

impl VggConfig {
    pub fn new(ka_layers: Vec<usize>, activation: ActivationKind) -> Self {
        Self {
            ka_layers,
            activation,
            num_classes: default_vgg_classes(),
            in_channels: default_in_channels(),
            hidden: default_vgg_hidden(),
            width_divisor: default_divisor(),
        }
    }

    /// Output width of convolution `i` (0-based) after the divisor.
    pub fn width(&self, i: usize) -> usize {
        (VGG11[i].0 / self.width_divisor).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.ka_layers.iter().enumerate() {
            ensure!((1..=8).contains(&l), Config, "VGG11 layer index {l} is outside 1..=8");
            ensure!(!self.ka_layers[..i].contains(&l), Config, "VGG11 layer index {l} is listed twice");
        }
        ensure!(self.num_classes >= 1 && self.in_channels >= 1 && self.hidden >= 1, Config, "VGG widths must be positive");
        ensure!(self.width_divisor >= 1, Config, "VGG width divisor must be at least 1");
        Ok(())
    }
}

/// Any buildable architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum NetworkConfig {
    KaConvNet(KaConvNetConfig),
    Vgg(VggConfig),
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkConfig::KaConvNet(c) => c.validate(),
            NetworkConfig::Vgg(c) => c.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            NetworkConfig::KaConvNet(c) => c.num_classes,
            NetworkConfig::Vgg(c) => c.num_classes,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            NetworkConfig::KaConvNet(c) => c.in_channels,
            NetworkConfig::Vgg(c) => c.in_channels,
        }
    }

    /// Named presets: `kaconvnet-{s,b,l}` (1000 classes), their `convnet-*`
    /// all-convolution counterparts, `vgg11` and `kavgg11` (100 classes).
    pub fn preset(name: &str) -> Result<Self> {
        let dagger = |mut c: KaConvNetConfig| {
            c.stage_ka_mask = [false; 4];
            c
        };
        Ok(match name {
            "kaconvnet-s" => NetworkConfig::KaConvNet(KaConvNetConfig::small(1000)),
            "kaconvnet-b" => NetworkConfig::KaConvNet(KaConvNetConfig::base(1000)),
            "kaconvnet-l" => NetworkConfig::KaConvNet(KaConvNetConfig::large(1000)),
            "convnet-s" => NetworkConfig::KaConvNet(dagger(KaConvNetConfig::small(1000))),
            "convnet-b" => NetworkConfig::KaConvNet(dagger(KaConvNetConfig::base(1000))),
            "convnet-l" => NetworkConfig::KaConvNet(dagger(KaConvNetConfig::large(1000))),
            "vgg11" => NetworkConfig::Vgg(VggConfig::new(vec![], ActivationKind::default())),
            "kavgg11" => NetworkConfig::Vgg(VggConfig::new((1..=8).collect(), ActivationKind::default())),
            other => {
                return Err(crate::Error::Config(format!(
                    "unknown preset `{other}`; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }
}

pub const PRESETS: [&str; 8] =
    ["kaconvnet-s", "kaconvnet-b", "kaconvnet-l", "convnet-s", "convnet-b", "convnet-l", "vgg11", "kavgg11"];

fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// Convolution with fan-in uniform initialization.
pub fn conv<R: Rng + ?Sized>(c_in: usize, c_out: usize, spec: ConvSpec, bias: bool, rng: &mut R) -> Layer<f64> {
    let fan_in = c_in / spec.groups * spec.kernel * spec.kernel;
    let w = uniform_fan_in(&[c_out, c_in / spec.groups, spec.kernel, spec.kernel], fan_in, rng);
    let b = bias.then(|| uniform_fan_in(&[c_out], fan_in, rng));
    Layer::Conv(Conv { w, b, spec })
}

pub fn linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Linear<f64> {
    Linear { w: uniform_fan_in(&[fan_out, fan_in], fan_in, rng), b: uniform_fan_in(&[fan_out], fan_in, rng) }
}

fn depthwise<R: Rng + ?Sized>(c: usize, stride: usize, rng: &mut R) -> Layer<f64> {
    conv(c, c, ConvSpec::same(3, stride, c), false, rng)
}

fn pointwise<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Layer<f64> {
    conv(c_in, c_out, ConvSpec::same(1, 1, 1), false, rng)
}

fn bn(c: usize) -> Layer<f64> {
    Layer::Norm(BatchNorm::new(c))
}

/// Squeeze-and-excitation with bottleneck `C / r`.
pub fn se_block<R: Rng + ?Sized>(c: usize, r: usize, rng: &mut R) -> Result<Layer<f64>> {
    ensure!(r >= 1 && c.is_multiple_of(r), Config, "SE reduction {r} does not divide {c} channels");
    let hidden = c / r;
    Ok(Layer::Se(Se { fc1: linear(c, hidden, rng), fc2: linear(hidden, c, rng) }))
}

/// Residual block `x + FFN(SE(mixer(x)))`, where the mixer is a KA layer or,
/// when `ka` is false, a 3×3 convolution with batch norm and SiLU.
pub fn kaconv_block<R: Rng + ?Sized>(cfg: &KaConvNetConfig, c: usize, ka: bool, rng: &mut R) -> Result<Layer<f64>> {
    let mut body = Vec::new();
    if ka {
        body.push(Layer::Ka(KaConv::new(cfg.ka_layer(c, c, 1), rng)?));
    } else {
        body.extend([conv(c, c, ConvSpec::same(cfg.ka_kernel, 1, 1), false, rng), bn(c), Layer::Silu]);
    }
    body.push(se_block(c, cfg.se_reduction, rng)?);
    if cfg.ffn_ratio > 0 {
        let hidden = cfg.ffn_ratio * c;
        body.extend([pointwise(c, hidden, rng), Layer::Silu, pointwise(hidden, c, rng)]);
    }
    Ok(Layer::Residual(body))
}

/// 4× downsampler: strided KA (or 3×3 conv) into `C₁`, depthwise 3×3,
/// pointwise 1×1 and a strided depthwise 3×3.
pub fn build_stem<R: Rng + ?Sized>(cfg: &KaConvNetConfig, rng: &mut R) -> Result<Vec<Layer<f64>>> {
    let (ci, c) = (cfg.in_channels, cfg.channels[0]);
    let mut layers = Vec::new();
    if cfg.stage_ka_mask.iter().any(|&m| m) {
        layers.push(Layer::Ka(KaConv::new(cfg.ka_layer(ci, c, 2), rng)?));
    } else {
        layers.extend([conv(ci, c, ConvSpec::same(cfg.ka_kernel, 2, 1), false, rng), bn(c), Layer::Silu]);
    }
    layers.extend([depthwise(c, 1, rng), bn(c), Layer::Silu, pointwise(c, c, rng), bn(c)]);
    layers.extend([depthwise(c, 2, rng), bn(c), Layer::Silu]);
    Ok(layers)
}

/// Channel increase by a 1×1 convolution, then a strided depthwise 3×3.
pub fn build_transition<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Vec<Layer<f64>> {
    vec![pointwise(c_in, c_out, rng), bn(c_out), depthwise(c_out, 2, rng), bn(c_out), Layer::Silu]
}

pub fn build_kaconvnet<R: Rng + ?Sized>(cfg: &KaConvNetConfig, rng: &mut R) -> Result<Vec<Layer<f64>>> {
    cfg.validate()?;
    let mut layers = build_stem(cfg, rng)?;
    for stage in 0..4 {
        let c = cfg.channels[stage];
        if stage > 0 {
            layers.extend(build_transition(cfg.channels[stage - 1], c, rng));
        }
        for _ in 0..cfg.blocks[stage] {
            layers.push(kaconv_block(cfg, c, cfg.stage_ka_mask[stage], rng)?);
        }
    }
    layers.push(Layer::GlobalPool);
    let c = cfg.channels[3];
    if cfg.head_hidden > 0 {
        layers.push(Layer::Linear(linear(c, cfg.head_hidden, rng)));
        layers.push(Layer::Silu);
        layers.push(Layer::Linear(linear(cfg.head_hidden, cfg.num_classes, rng)));
    } else {
        layers.push(Layer::Linear(linear(c, cfg.num_classes, rng)));
    }
    Ok(layers)
}

/// VGG11 with batch norm; a replaced layer keeps its norm and ReLU.
pub fn build_kavgg11<R: Rng + ?Sized>(cfg: &VggConfig, rng: &mut R) -> Result<Vec<Layer<f64>>> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut c_in = cfg.in_channels;
    for (i, &(_, pool)) in VGG11.iter().enumerate() {
        let c_out = cfg.width(i);
        if cfg.ka_layers.contains(&(i + 1)) {
            let ka = KaConvConfig::new(c_in, c_out, 3, 1).with_activation(cfg.activation);
            layers.push(Layer::Ka(KaConv::new(ka, rng)?));
        } else {
            layers.push(conv(c_in, c_out, ConvSpec::same(3, 1, 1), true, rng));
        }
        layers.extend([bn(c_out), Layer::Relu]);
        if pool {
            layers.push(Layer::MaxPool);
        }
        c_in = c_out;
    }
    layers.push(Layer::GlobalPool);
    layers.extend([
        Layer::Linear(linear(c_in, cfg.hidden, rng)),
        Layer::Relu,
        Layer::Linear(linear(cfg.hidden, cfg.hidden, rng)),
        Layer::Relu,
        Layer::Linear(linear(cfg.hidden, cfg.num_classes, rng)),
    ]);
    Ok(layers)
}
