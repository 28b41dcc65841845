//! Segmentation backbones with multi-resolution 1x1 classification heads.
//!
//! Both backbones are fully convolutional. Each head is a bias-free 1x1
//! convolution whose weight rows (one per class) are what the imprinting
//! module writes into. Head logits are bilinearly upsampled to the input
//! resolution and summed, so the fused logits stay linear in every head's
//! weights and in every head's input features.

mod io;

pub use io::{from_bytes, load, save, to_bytes, ModelFormatError, FORMAT_VERSION, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Graph, NumericsError, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image shape {got:?} does not match configured input {expected:?}")]
    InputSize { got: Vec<usize>, expected: Vec<usize> },
    #[error("class `{0}` already exists in the model")]
    DuplicateClass(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Plain encoder; heads tap the pooled output of every encoder block.
    #[serde(rename = "fcn", alias = "fcn_like")]
    FcnLike,
    /// Encoder-decoder with skip concatenation; heads tap every decoder level
    /// and the bottleneck.
    #[serde(rename = "unet", alias = "unet_like")]
    UnetLike,
}

impl BackboneKind {
    pub fn code(self) -> u8 {
        match self {
            Self::FcnLike => 0,
            Self::UnetLike => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::FcnLike),
            1 => Some(Self::UnetLike),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FcnLike => "fcn",
            Self::UnetLike => "unet",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcn" | "fcn_like" => Ok(Self::FcnLike),
            "unet" | "unet_like" => Ok(Self::UnetLike),
            other => Err(format!("unknown backbone `{other}` (expected fcn or unet)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            image_channels: 1,
            base_channels: 16,
            levels: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel width of encoder level `level` (bottleneck reuses the deepest).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level.min(self.levels - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels == 0 || self.base_channels == 0 || self.image_channels == 0 {
            return Err(ModelError::Config("levels, base_channels and image_channels must be positive".into()));
        }
        let unit = 1usize << self.levels;
        if self.input_height % unit != 0 || self.input_width % unit != 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} is not divisible by 2^{} = {unit}",
                self.input_height, self.input_width, self.levels
            )));
        }
        Ok(())
    }
}

/// Where a head attaches: `level` 0 is full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub level: usize,
    pub in_channels: usize,
}

/// Bias-free 1x1 convolution, stored as `[num_classes, in_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub spec: HeadSpec,
    pub weight: Tensor,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn row(&self, class: usize) -> &[f32] {
        self.weight.slab(class)
    }

    pub fn row_mut(&mut self, class: usize) -> &mut [f32] {
        self.weight.slab_mut(class)
    }

    fn kernel(&self) -> Tensor {
        let [nc, c] = [self.weight.shape()[0], self.weight.shape()[1]];
        self.weight.clone().reshape(&[nc, c, 1, 1]).expect("same element count")
    }
}

/// 3x3 same-padded convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn he_uniform(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        let bound = (6.0 / (c_in * 9) as f32).sqrt();
        Self {
            kernel: Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// Two conv+relu layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ConvBlock {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Self {
            first: Conv::he_uniform(rng, c_in, c_out),
            second: Conv::he_uniform(rng, c_out, c_out),
        }
    }

    fn out_channels(&self) -> usize {
        self.second.kernel.shape()[0]
    }
}

/// Pre-head activations, one `[C, H/2^l, W/2^l]` tensor per head.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub features: Vec<Tensor>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            features: self.features.iter().map(|f| f.scale(s)).collect(),
        }
    }
}

/// A recorded forward pass, kept so training can run backward through it.
pub struct ForwardPass {
    pub graph: Graph,
    /// Parameter vars in [`SegModel::parameters`] order.
    pub params: Vec<Var>,
    /// Head input vars in head order.
    pub features: Vec<Var>,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub kind: BackboneKind,
    pub config: ModelConfig,
    pub encoder: Vec<ConvBlock>,
    pub bottleneck: Option<ConvBlock>,
    /// Decoder blocks in execution order (deepest level first).
    pub decoder: Vec<ConvBlock>,
    pub heads: Vec<ClassifierHead>,
    pub class_names: Vec<String>,
    /// Set once old-class rows have been scaled to unit norm before the first
    /// blended update.
    pub rows_prenormalized: bool,
}

impl SegModel {
    /// Builds a freshly initialized model with `class_names.len()` classes.
    pub fn build(kind: BackboneKind, config: ModelConfig, class_names: Vec<String>) -> Result<Self, ModelError> {
        config.validate()?;
        if class_names.is_empty() {
            return Err(ModelError::Config("at least one class is required".into()));
        }
        for (i, name) in class_names.iter().enumerate() {
            if class_names[..i].contains(name) {
                return Err(ModelError::DuplicateClass(name.clone()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let levels = config.levels;
        let mut encoder = Vec::with_capacity(levels);
        let mut c_in = config.image_channels;
        for l in 0..levels {
            encoder.push(ConvBlock::new(&mut rng, c_in, config.width(l)));
            c_in = config.width(l);
        }
        let (bottleneck, decoder) = match kind {
            BackboneKind::FcnLike => (None, Vec::new()),
            BackboneKind::UnetLike => {
                let bottleneck = ConvBlock::new(&mut rng, c_in, config.width(levels));
                let mut below = bottleneck.out_channels();
                let mut decoder = Vec::with_capacity(levels);
                for l in (0..levels).rev() {
                    let block = ConvBlock::new(&mut rng, below + config.width(l), config.width(l));
                    below = block.out_channels();
                    decoder.push(block);
                }
                (Some(bottleneck), decoder)
            }
        };
        let specs = Self::head_specs_for(kind, &config);
        let nc = class_names.len();
        let heads = specs
            .into_iter()
            .map(|spec| {
                let bound = (6.0 / spec.in_channels as f32).sqrt();
                ClassifierHead {
                    spec,
                    weight: Tensor::from_fn(&[nc, spec.in_channels], |_| rng.gen_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self {
            kind,
            config,
            encoder,
            bottleneck,
            decoder,
            heads,
            class_names,
            rows_prenormalized: false,
        })
    }

    /// Head attachment points, ordered by increasing depth.
    pub fn head_specs_for(kind: BackboneKind, config: &ModelConfig) -> Vec<HeadSpec> {
        let levels = config.levels;
        match kind {
            BackboneKind::FcnLike => (1..=levels)
                .map(|l| HeadSpec {
                    level: l,
                    in_channels: config.width(l - 1),
                })
                .collect(),
            BackboneKind::UnetLike => (0..=levels)
                .map(|l| HeadSpec {
                    level: l,
                    in_channels: config.width(l),
                })
                .collect(),
        }
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        self.heads.iter().map(|h| h.spec).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.image_channels, self.config.input_height, self.config.input_width]
    }

    /// Every trainable tensor in canonical order: encoder, bottleneck,
    /// decoder (conv kernel then bias, per layer), then head weights.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in self.encoder.iter().chain(&self.bottleneck).chain(&self.decoder) {
            for conv in [&block.first, &block.second] {
                out.push(&conv.kernel);
                out.push(&conv.bias);
            }
        }
        out.extend(self.heads.iter().map(|h| &h.weight));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in self
            .encoder
            .iter_mut()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut())
        {
            let ConvBlock { first, second } = block;
            out.push(&mut first.kernel);
            out.push(&mut first.bias);
            out.push(&mut second.kernel);
            out.push(&mut second.bias);
        }
        out.extend(self.heads.iter_mut().map(|h| &mut h.weight));
        out
    }

    fn check_input(&self, image: &Tensor) -> Result<(), ModelError> {
        let expected = self.input_shape();
        if image.shape() != expected {
            return Err(ModelError::InputSize {
                got: image.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// Records a full forward pass on a fresh tape.
    pub fn forward_pass(&self, image: &Tensor) -> Result<ForwardPass, ModelError> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let x = g.input(image.clone());

        let mut params = Vec::new();
        // Returns the last conv's pre-activation and its ReLU.
        let conv_block = |g: &mut Graph,
                          params: &mut Vec<Var>,
                          block: &ConvBlock,
                          input: Var|
         -> Result<(Var, Var), NumericsError> {
            let mut h = input;
            let mut pre = input;
            for conv in [&block.first, &block.second] {
                let k = g.param(conv.kernel.clone());
                let b = g.param(conv.bias.clone());
                params.push(k);
                params.push(b);
                let c = g.conv2d(h, k, 1, 1)?;
                pre = g.channel_bias(c, b)?;
                h = g.relu(pre);
            }
            Ok((pre, h))
        };

        // Heads read pre-activations so their inputs are signed.
        let mut features = Vec::with_capacity(self.heads.len());
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (pre, e) = conv_block(&mut g, &mut params, block, h)?;
            if self.kind == BackboneKind::FcnLike {
                // relu and maxpool commute, so the main path is unchanged.
                let pooled = g.maxpool2(pre)?;
                features.push(pooled);
                h = g.relu(pooled);
            } else {
                skips.push(e);
                h = g.maxpool2(e)?;
            }
        }
        if let Some(bottleneck) = &self.bottleneck {
            let (pre, mut d) = conv_block(&mut g, &mut params, bottleneck, h)?;
            let mut by_level = vec![pre];
            for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
                let up = g.upsample_nearest2(d)?;
                let cat = g.concat(up, *skip)?;
                let (pre, post) = conv_block(&mut g, &mut params, block, cat)?;
                d = post;
                by_level.push(pre);
            }
            by_level.reverse();
            features = by_level;
        }

        let out_hw = (self.config.input_height, self.config.input_width);
        let mut logits: Option<Var> = None;
        for (head, &f) in self.heads.iter().zip(&features) {
            let w = g.param(head.kernel());
            params.push(w);
            let z = g.conv2d(f, w, 1, 0)?;
            let z = g.upsample_bilinear(z, out_hw)?;
            logits = Some(match logits {
                None => z,
                Some(acc) => g.add(acc, z)?,
            });
        }
        Ok(ForwardPass {
            graph: g,
            params,
            features,
            logits: logits.expect("model has at least one head"),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let pass = self.forward_pass(image)?;
        Ok(pass.graph.value(pass.logits).clone())
    }

    /// The exact tensors each head consumes.
    pub fn extract_features(&self, image: &Tensor) -> Result<FeatureStack, ModelError> {
        let pass = self.forward_pass(image)?;
        Ok(FeatureStack {
            features: pass.features.iter().map(|&v| pass.graph.value(v).clone()).collect(),
        })
    }

    /// Applies the heads to precomputed features and fuses them at full
    /// resolution. Bitwise equal to [`SegModel::forward`] on the same input.
    pub fn logits_from_features(&self, features: &FeatureStack) -> Result<Tensor, ModelError> {
        if features.len() != self.heads.len() {
            return Err(ModelError::Config(format!(
                "{} feature maps for {} heads",
                features.len(),
                self.heads.len()
            )));
        }
        let out_hw = (self.config.input_height, self.config.input_width);
        let mut logits: Option<Tensor> = None;
        for (head, f) in self.heads.iter().zip(&features.features) {
            let z = numerics::upsample_bilinear(&numerics::conv2d(f, &head.kernel(), 1, 0)?, out_hw)?;
            match &mut logits {
                None => logits = Some(z),
                Some(acc) => acc.add_assign(&z)?,
            }
        }
        Ok(logits.expect("model has at least one head"))
    }

    /// Full-resolution logit contribution of one head.
    pub fn head_contribution(&self, head: usize, features: &FeatureStack) -> Result<Tensor, ModelError> {
        let out_hw = (self.config.input_height, self.config.input_width);
        let h = &self.heads[head];
        Ok(numerics::upsample_bilinear(
            &numerics::conv2d(&features.features[head], &h.kernel(), 1, 0)?,
            out_hw,
        )?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<crate::Mask, ModelError> {
        Ok(numerics::argmax_channels(&self.forward(image)?)?)
    }

    /// Appends a class with an all-zero row in every head.
    pub fn add_class_slot(&mut self, name: &str) -> Result<usize, ModelError> {
        if self.class_index(name).is_some() {
            return Err(ModelError::DuplicateClass(name.to_string()));
        }
        for head in &mut self.heads {
            let [nc, c] = [head.weight.shape()[0], head.weight.shape()[1]];
            let mut data = std::mem::replace(&mut head.weight, Tensor::zeros(&[1])).into_data();
            data.extend(std::iter::repeat(0.0).take(c));
            head.weight = Tensor::new(vec![nc + 1, c], data)?;
        }
        self.class_names.push(name.to_string());
        Ok(self.class_names.len() - 1)
    }
}
