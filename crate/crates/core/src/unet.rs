//! Stack U-Net: a 2D encoder-decoder that takes a `k`-slice stack as `k` input
//! channels and emits `k` probability slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{clamp_probabilities, loss_gradient, stack_loss, LossWeights, StackLossValue};
use crate::nn::{
    concat_channels, join, split_channels, BatchNorm2d, Checkpoint, Conv2d, Deconv2d, MaxPool2x2, Mode, Module, Param,
    Relu, Sigmoid,
};
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "stack-unet";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub k: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub length: usize,
    pub width: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { k: 7, base_channels: 16, depth: 4, length: 64, width: 64 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Invalid(format!("k, base_channels and depth must be >= 1: {self:?}")));
        }
        let f = 1usize << self.depth;
        if self.length == 0 || self.length % f != 0 {
            return Err(Error::shape("unet", "length", format!("{} is not divisible by 2^{}", self.length, self.depth)));
        }
        if self.width == 0 || self.width % f != 0 {
            return Err(Error::shape("unet", "width", format!("{} is not divisible by 2^{}", self.width, self.depth)));
        }
        Ok(())
    }

    /// Feature width at encoder level `j`; level `depth` is the bottom unit.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count entering each decoder unit's conv after the skip concat,
    /// listed for levels `0..depth`.
    pub fn decoder_concat_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|j| self.channels(j) + self.channels(j)).collect()
    }

    fn meta(&self) -> Vec<(String, String)> {
        [
            ("k", self.k),
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("length", self.length),
            ("width", self.width),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            ckpt.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks integer meta '{key}'")))
        };
        Ok(UNetConfig {
            k: get("k")?,
            base_channels: get("base_channels")?,
            depth: get("depth")?,
            length: get("length")?,
            width: get("width")?,
        })
    }
}

/// Conv -> ReLU -> BatchNorm, the repeated building block.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    relu: Relu,
    bn: BatchNorm2d,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        ConvBlock { conv: Conv2d::new(c_in, c_out, 3, 1, 1, rng), relu: Relu::default(), bn: BatchNorm2d::new(c_out) }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.relu.forward(&y);
        self.bn.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.bn.backward(g)?;
        let g = self.relu.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl Module for ConvBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }
}

/// Two conv blocks; used for encoder levels and the bottom unit.
#[derive(Clone, Debug)]
struct DoubleBlock {
    first: ConvBlock,
    second: ConvBlock,
}

impl DoubleBlock {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        DoubleBlock { first: ConvBlock::new(c_in, c_out, rng), second: ConvBlock::new(c_out, c_out, rng) }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.first.forward(x, mode)?;
        self.second.forward(&y, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.second.backward(g)?;
        self.first.backward(&g)
    }
}

impl Module for DoubleBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.first.visit_params(&join(prefix, "block1"), f);
        self.second.visit_params(&join(prefix, "block2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.first.visit_params_mut(&join(prefix, "block1"), f);
        self.second.visit_params_mut(&join(prefix, "block2"), f);
    }
}

#[derive(Clone, Debug)]
struct UpUnit {
    up: Deconv2d,
    block: ConvBlock,
    skip_channels: usize,
}

impl UpUnit {
    fn forward(&mut self, below: &Tensor, skip: &Tensor, mode: Mode) -> Result<Tensor> {
        let up = self.up.forward(below)?;
        let cat = concat_channels(skip, &up)?;
        self.block.forward(&cat, mode)
    }

    /// Returns gradients for `(below, skip)`.
    fn backward(&mut self, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = self.block.backward(g)?;
        let (g_skip, g_up) = split_channels(&g, self.skip_channels)?;
        Ok((self.up.backward(&g_up)?, g_skip))
    }
}

impl Module for UpUnit {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.up.visit_params(&join(prefix, "deconv"), f);
        self.block.visit_params(&join(prefix, "block"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.up.visit_params_mut(&join(prefix, "deconv"), f);
        self.block.visit_params_mut(&join(prefix, "block"), f);
    }
}

#[derive(Clone, Debug)]
pub struct StackUNet {
    config: UNetConfig,
    encoders: Vec<DoubleBlock>,
    pools: Vec<MaxPool2x2>,
    bottom: DoubleBlock,
    /// Indexed by level; run from `depth - 1` down to 0.
    decoders: Vec<UpUnit>,
    head: Conv2d,
    sigmoid: Sigmoid,
    recorded: bool,
}

impl StackUNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = |j| config.channels(j);
        let mut encoders = Vec::with_capacity(config.depth);
        for j in 0..config.depth {
            let c_in = if j == 0 { config.k } else { c(j - 1) };
            encoders.push(DoubleBlock::new(c_in, c(j), rng));
        }
        let bottom = DoubleBlock::new(c(config.depth - 1), c(config.depth), rng);
        let mut decoders = Vec::with_capacity(config.depth);
        for j in 0..config.depth {
            decoders.push(UpUnit {
                up: Deconv2d::new(c(j + 1), c(j), 2, 2, 0, rng),
                block: ConvBlock::new(c(j) + c(j), c(j), rng),
                skip_channels: c(j),
            });
        }
        let head = Conv2d::new(c(0), config.k, 1, 1, 0, rng);
        Ok(StackUNet {
            config,
            encoders,
            pools: vec![MaxPool2x2::default(); config.depth],
            bottom,
            decoders,
            head,
            sigmoid: Sigmoid::default(),
            recorded: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Input channel count of each decoder unit's conv, as built.
    pub fn decoder_concat_widths(&self) -> Vec<usize> {
        self.decoders.iter().map(|d| d.block.conv.in_channels()).collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (k, l, w) = x.dims3("unet forward")?;
        let cfg = self.config;
        if k != cfg.k {
            return Err(Error::shape("unet forward", "channels", format!("expected {} slices, got {k}", cfg.k)));
        }
        if l != cfg.length {
            return Err(Error::shape("unet forward", "length", format!("expected {}, got {l}", cfg.length)));
        }
        if w != cfg.width {
            return Err(Error::shape("unet forward", "width", format!("expected {}, got {w}", cfg.width)));
        }
        self.recorded = false;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x.clone();
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            let f = enc.forward(&h, mode)?;
            h = pool.forward(&f)?;
            skips.push(f);
        }
        h = self.bottom.forward(&h, mode)?;
        for j in (0..cfg.depth).rev() {
            h = self.decoders[j].forward(&h, &skips[j], mode)?;
        }
        let logits = self.head.forward(&h)?;
        let y = self.sigmoid.forward(&logits);
        y.check_finite("unet output")?;
        self.recorded = true;
        Ok(y)
    }

    /// Accumulates parameter gradients for `grad_out = ∂L/∂output` and returns
    /// the gradient with respect to the input stack.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        if !self.recorded {
            return Err(Error::NoTape("unet"));
        }
        let g = self.sigmoid.backward(grad_out)?;
        let mut g = self.head.backward(&g)?;
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for j in 0..self.config.depth {
            let (below, skip) = self.decoders[j].backward(&g)?;
            g = below;
            skip_grads.push(skip);
        }
        g = self.bottom.backward(&g)?;
        for j in (0..self.config.depth).rev() {
            g = self.pools[j].backward(&g)?;
            g.add_assign(&skip_grads[j]);
            g = self.encoders[j].backward(&g)?;
        }
        Ok(g)
    }

    /// One training forward/backward on a stack: predictions are clamped away
    /// from 0 and 1, and the scaled loss gradient is back-propagated. Gradients
    /// accumulate; the caller zeroes them and steps the optimiser.
    pub fn accumulate_gradients(
        &mut self,
        x: &Tensor,
        label: &Tensor,
        weights: &LossWeights,
        scale: f64,
    ) -> Result<StackLossValue> {
        let y = self.forward(x, Mode::Train)?;
        let (clamped, pass) = clamp_probabilities(&y);
        let value = stack_loss(&clamped, label, weights)?;
        let mut g = loss_gradient(&clamped, label, weights)?;
        for (v, &keep) in g.data_mut().iter_mut().zip(&pass) {
            *v = if keep { *v * scale } else { 0.0 };
        }
        self.backward(&g)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self, MODEL_KIND, self.config.meta())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model_kind != MODEL_KIND {
            return Err(Error::Invalid(format!("checkpoint holds '{}', not {MODEL_KIND}", ckpt.model_kind)));
        }
        let config = UNetConfig::from_meta(ckpt)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = StackUNet::new(config, &mut rng)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }
}

impl Module for StackUNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (j, e) in self.encoders.iter().enumerate() {
            e.visit_params(&join(prefix, &format!("enc{j}")), f);
        }
        self.bottom.visit_params(&join(prefix, "bottom"), f);
        for (j, d) in self.decoders.iter().enumerate() {
            d.visit_params(&join(prefix, &format!("dec{j}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (j, e) in self.encoders.iter_mut().enumerate() {
            e.visit_params_mut(&join(prefix, &format!("enc{j}")), f);
        }
        self.bottom.visit_params_mut(&join(prefix, "bottom"), f);
        for (j, d) in self.decoders.iter_mut().enumerate() {
            d.visit_params_mut(&join(prefix, &format!("dec{j}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
