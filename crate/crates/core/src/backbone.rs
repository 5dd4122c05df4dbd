//! Four-block convolutional classifiers.
//!
//! Each block is a 3×3 convolution, a ReLU and a batch norm (order
//! configurable), downsampling either through a stride-2 convolution or a
//! trailing 2×2 max pool. A single fully-connected layer maps the features
//! to `n_way` logits. Blocks are layers `0..4`; the classifier is layer `4`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Batch, Evaluation, Model, Need};
use crate::params::{ParamKind, ParamTree, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

pub const BLOCKS: usize = 4;
pub const FC_LAYER: usize = BLOCKS;
const KERNEL: usize = 3;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Omniglot,
    MiniImagenet,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsampling {
    StridedConv,
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOrder {
    ConvReluBn,
    ConvBnRelu,
}

/// How the last block's feature map reaches the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Flatten,
    GlobalAvgPool,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err($crate::error::Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}, expected one of: ", $($text, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

text_enum!(Variant { Omniglot => "omniglot", MiniImagenet => "mini_imagenet", Custom => "custom" });
text_enum!(Downsampling { StridedConv => "strided_conv_2", MaxPool => "maxpool_2" });
text_enum!(BlockOrder { ConvReluBn => "conv_relu_bn", ConvBnRelu => "conv_bn_relu" });
text_enum!(Head { Flatten => "flatten", GlobalAvgPool => "global_avg_pool" });

/// Input image geometry `[channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub channels: [usize; BLOCKS],
    pub downsampling: Downsampling,
    pub block_order: BlockOrder,
    pub head: Head,
    pub input: InputShape,
    pub n_way: usize,
    pub bn_epsilon: f64,
}

impl BackboneConfig {
    /// 64-channel strided-conv network on 28×28 grayscale images.
    pub fn omniglot(n_way: usize) -> Self {
        Self {
            variant: Variant::Omniglot,
            channels: [64; BLOCKS],
            downsampling: Downsampling::StridedConv,
            block_order: BlockOrder::ConvReluBn,
            head: Head::GlobalAvgPool,
            input: InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            n_way,
            bn_epsilon: 1e-5,
        }
    }

    /// 32-channel max-pooling network on 84×84 RGB images.
    pub fn mini_imagenet(n_way: usize) -> Self {
        Self {
            variant: Variant::MiniImagenet,
            channels: [32; BLOCKS],
            downsampling: Downsampling::MaxPool,
            block_order: BlockOrder::ConvReluBn,
            head: Head::Flatten,
            input: InputShape {
                channels: 3,
                height: 84,
                width: 84,
            },
            n_way,
            bn_epsilon: 1e-5,
        }
    }

    /// Defaults for a variant; `Custom` starts from the Omniglot layout.
    pub fn for_variant(variant: Variant, n_way: usize) -> Self {
        match variant {
            Variant::MiniImagenet => Self::mini_imagenet(n_way),
            Variant::Omniglot => Self::omniglot(n_way),
            Variant::Custom => Self {
                variant: Variant::Custom,
                ..Self::omniglot(n_way)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.input.channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        if self.input.height != self.input.width {
            return Err(Error::Config(format!(
                "input must be square, got {}x{}",
                self.input.height, self.input.width
            )));
        }
        let min = 1 << BLOCKS;
        if self.input.height < min {
            return Err(Error::Config(format!(
                "input {}x{} is too small for {} downsamplings (need at least {min}x{min})",
                self.input.height, self.input.width, BLOCKS
            )));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side length after each block.
    pub fn spatial_sizes(&self) -> [usize; BLOCKS] {
        let mut side = self.input.height;
        let mut out = [0; BLOCKS];
        for s in &mut out {
            side = match self.downsampling {
                Downsampling::StridedConv => (side - 1) / 2 + 1,
                Downsampling::MaxPool => side / 2,
            };
            *s = side;
        }
        out
    }

    /// Width of the classifier input.
    pub fn feature_dim(&self) -> usize {
        let last = self.channels[BLOCKS - 1];
        match self.head {
            Head::GlobalAvgPool => last,
            Head::Flatten => {
                let side = self.spatial_sizes()[BLOCKS - 1];
                last * side * side
            }
        }
    }

    /// Parameter count from the layer shapes.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.input.channels;
        for &c in &self.channels {
            total += KERNEL * KERNEL * c_in * c + c; // conv weight + bias
            total += 2 * c; // gamma + beta
            c_in = c;
        }
        total + self.feature_dim() * self.n_way + self.n_way
    }

    fn conv_stride(&self) -> usize {
        match self.downsampling {
            Downsampling::StridedConv => 2,
            Downsampling::MaxPool => 1,
        }
    }
}

/// Draws from N(0, std²) truncated to two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Initializes parameters for `config`; deterministic in `seed`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamTree> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = ParamTree::new();
    let mut c_in = config.input.channels;
    for (layer, &c) in config.channels.iter().enumerate() {
        let w = truncated_normal(&mut rng, c * c_in * KERNEL * KERNEL, INIT_STD);
        tree.insert(layer, ParamKind::ConvWeight, Tensor::new([c, c_in, KERNEL, KERNEL], w)?)?;
        tree.insert(layer, ParamKind::ConvBias, Tensor::zeros([c]))?;
        tree.insert(layer, ParamKind::BnGamma, Tensor::full([c], 1.0))?;
        tree.insert(layer, ParamKind::BnBeta, Tensor::zeros([c]))?;
        c_in = c;
    }
    let d = config.feature_dim();
    let w = truncated_normal(&mut rng, config.n_way * d, INIT_STD);
    tree.insert(FC_LAYER, ParamKind::FcWeight, Tensor::new([config.n_way, d], w)?)?;
    tree.insert(FC_LAYER, ParamKind::FcBias, Tensor::zeros([config.n_way]))?;
    Ok(tree)
}

/// Logits and per-block activations recorded on a tape.
pub struct ForwardPass<'t> {
    pub logits: Var<'t>,
    pub activations: Vec<Var<'t>>,
}

/// The four-block network as a [`Model`].
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn init(&self, seed: u64) -> Result<ParamTree> {
        build_backbone(&self.config, seed)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let i = self.config.input;
        if shape.len() != 4 || shape[1..] != [i.channels, i.height, i.width] {
            return Err(crate::tensor::TensorError::Dimension {
                op: "backbone",
                detail: format!("expected [B, {}, {}, {}], got {:?}", i.channels, i.height, i.width, shape),
            }
            .into());
        }
        Ok(())
    }

    /// Records the forward pass of `input` on `params`' tape.
    pub fn forward<'t>(&self, params: &ParamVars<'t>, input: Var<'t>) -> Result<ForwardPass<'t>> {
        self.check_input(&input.shape())?;
        let cfg = &self.config;
        let mut h = input;
        let mut activations = Vec::with_capacity(BLOCKS);
        for layer in 0..BLOCKS {
            let w = params.get(layer, ParamKind::ConvWeight)?;
            let b = params.get(layer, ParamKind::ConvBias)?;
            let gamma = params.get(layer, ParamKind::BnGamma)?;
            let beta = params.get(layer, ParamKind::BnBeta)?;
            h = h.conv2d(&w, &b, cfg.conv_stride(), 1)?;
            h = match cfg.block_order {
                BlockOrder::ConvReluBn => h.relu().batchnorm_train(&gamma, &beta, cfg.bn_epsilon)?,
                BlockOrder::ConvBnRelu => h.batchnorm_train(&gamma, &beta, cfg.bn_epsilon)?.relu(),
            };
            if cfg.downsampling == Downsampling::MaxPool {
                h = h.maxpool2x2()?;
            }
            activations.push(h);
        }
        let features = match cfg.head {
            Head::Flatten => h.flatten()?,
            Head::GlobalAvgPool => h.spatial_mean()?,
        };
        let logits = features.linear(
            &params.get(FC_LAYER, ParamKind::FcWeight)?,
            &params.get(FC_LAYER, ParamKind::FcBias)?,
        )?;
        Ok(ForwardPass { logits, activations })
    }

    /// Logits of `images` under `params`, without recording gradients.
    pub fn logits(&self, params: &ParamTree, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = params.to_tape(&tape);
        let pass = self.forward(&vars, tape.leaf(images.clone()))?;
        Ok((*pass.logits.value()).clone())
    }
}

/// Convenience wrapper: logits of `batch` for a freshly validated config.
pub fn forward(params: &ParamTree, batch: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    Backbone::new(config.clone())?.logits(params, batch)
}

impl Model for Backbone {
    fn evaluate(&self, params: &ParamTree, batch: &Batch, need: Need) -> Result<Evaluation> {
        let tape = Tape::new();
        let vars = params.to_tape(&tape);
        let pass = self.forward(&vars, tape.leaf(batch.images.clone()))?;
        let loss = pass.logits.softmax_cross_entropy(&batch.labels)?;
        let grads = if need.grads {
            tape.backward(loss)?;
            Some(vars.grads(&tape, params))
        } else {
            None
        };
        let activations = if need.activations {
            pass.activations.iter().map(|a| (*a.value()).clone()).collect()
        } else {
            Vec::new()
        };
        Ok(Evaluation {
            loss: loss.value().item().expect("scalar loss"),
            logits: (*pass.logits.value()).clone(),
            grads,
            activations,
        })
    }
}
