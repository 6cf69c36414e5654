//! LResNet18A: a residual network over `1 x 2 x 1024` I/Q frames, in a real
//! variant and three binarized ones.
//!
//! Unit layout: every convolution is followed by its own batch norm. A block
//! computes `act(BN(conv2(act(BN(conv1(x))))) + shortcut(x))`, where the
//! shortcut is the identity (kind A) or a strided 1x1 conv + BN (kind B).
//! Binarized convolutions take `sign` of their input activation and of their
//! (possibly rotated) weights.

pub mod complexity;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binary::{binary_conv2d, sign, ste_backward, BitTensor};
use crate::error::{Error, Result};
use crate::nn::{
    avgpool_global, avgpool_global_backward, conv2d_backward, conv2d_forward, dropout,
    dropout_backward, hardtanh, hardtanh_backward, linear_backward, linear_forward, BatchNorm,
    BnCache, ConvSpec, Mode,
};
use crate::rng::{stream, uniform_tensor};
use crate::rotation::{adjusted_weights, beta_grad, weight_grad, AdjustedWeights, RotationState};
use crate::tensor::Tensor;

pub use complexity::{analyze, ComplexityReport, CountingRules, LayerRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    Real,
    /// Every convolution and the classifier are binarized.
    Bnn,
    /// Binarized, but the first convolution and the classifier stay real.
    Bnn2Real,
    /// `Bnn2Real` plus a learned rotation on every binarized convolution.
    Rbnn,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::Real, Self::Bnn, Self::Bnn2Real, Self::Rbnn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Real => "real",
            Self::Bnn => "bnn",
            Self::Bnn2Real => "bnn2real",
            Self::Rbnn => "rbnn",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Self::Real => 0,
            Self::Bnn => 1,
            Self::Bnn2Real => 2,
            Self::Rbnn => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn binarizes_stem(self) -> bool {
        self == Self::Bnn
    }

    pub fn binarizes_blocks(self) -> bool {
        self != Self::Real
    }

    pub fn binarizes_classifier(self) -> bool {
        self == Self::Bnn
    }

    pub fn rotates(self) -> bool {
        self == Self::Rbnn
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {s:?} (expected real, bnn, bnn2real or rbnn)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub downsample: bool,
}

impl BlockSpec {
    pub fn a(channels: usize) -> Self {
        Self {
            kind: BlockKind::A,
            channels_in: channels,
            channels_out: channels,
            downsample: false,
        }
    }

    pub fn b(channels_in: usize, channels_out: usize) -> Self {
        Self {
            kind: BlockKind::B,
            channels_in,
            channels_out,
            downsample: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::config("block channel counts must be positive"));
        }
        if self.kind == BlockKind::A && (self.channels_in != self.channels_out || self.downsample) {
            return Err(Error::config(
                "an A block keeps its channel count and does not downsample",
            ));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        if self.downsample {
            2
        } else {
            1
        }
    }

    pub fn conv1(&self) -> ConvSpec {
        ConvSpec::square(self.channels_in, self.channels_out, 3, 1, 1)
    }

    /// The second 3x3 convolution carries the block's stride.
    pub fn conv2(&self) -> ConvSpec {
        ConvSpec::square(self.channels_out, self.channels_out, 3, self.stride(), 1)
    }

    pub fn shortcut(&self) -> Option<ConvSpec> {
        (self.kind == BlockKind::B)
            .then(|| ConvSpec::square(self.channels_in, self.channels_out, 1, self.stride(), 0))
    }
}

/// Architecture descriptor: input geometry, stem width, block list and
/// classifier size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// The full-width network: stem 32, blocks A32 A32 B32 A32 B64 A64 B128 A128.
    pub fn lresnet18a(num_classes: usize) -> Self {
        Self::with_base_width(32, num_classes)
    }

    /// Same topology with widths `(c, c, 2c, 4c)`.
    pub fn with_base_width(c: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 1,
            in_h: 2,
            in_w: 1024,
            stem_channels: c,
            blocks: vec![
                BlockSpec::a(c),
                BlockSpec::a(c),
                BlockSpec::b(c, c),
                BlockSpec::a(c),
                BlockSpec::b(c, 2 * c),
                BlockSpec::a(2 * c),
                BlockSpec::b(2 * c, 4 * c),
                BlockSpec::a(4 * c),
            ],
            num_classes,
        }
    }

    pub fn stem(&self) -> ConvSpec {
        ConvSpec::square(self.in_channels, self.stem_channels, 3, 1, 1)
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.stem_channels, |b| b.channels_out)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        if self.in_channels == 0 || self.in_h == 0 || self.in_w == 0 || self.stem_channels == 0 {
            return Err(Error::config(
                "input geometry and stem width must be positive",
            ));
        }
        let mut c = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.channels_in != c {
                return Err(Error::config(format!(
                    "block {} expects {} channels but receives {c}",
                    i + 1,
                    b.channels_in
                )));
            }
            c = b.channels_out;
        }
        self.output_volumes().map(|_| ())
    }

    /// `(layer name, [C, H, W])` after every stage, starting with the input.
    pub fn output_volumes(&self) -> Result<Vec<(String, [usize; 3])>> {
        let mut out = vec![(
            "input".to_string(),
            [self.in_channels, self.in_h, self.in_w],
        )];
        let (mut h, mut w) = self.stem().output_hw(self.in_h, self.in_w)?;
        out.push(("conv".into(), [self.stem_channels, h, w]));
        for b in &self.blocks {
            let (h1, w1) = b.conv1().output_hw(h, w)?;
            (h, w) = b.conv2().output_hw(h1, w1)?;
            let name = match b.kind {
                BlockKind::A => "R-Block A",
                BlockKind::B => "R-Block B",
            };
            out.push((name.into(), [b.channels_out, h, w]));
        }
        let c = self.feature_channels();
        out.push(("pool".into(), [c, 1, 1]));
        out.push(("BN".into(), [c, 1, 1]));
        out.push(("linear".into(), [self.num_classes, 1, 1]));
        Ok(out)
    }
}

/// How binarized convolutions are executed in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    /// Bit-packed XNOR/popcount kernel.
    #[default]
    Packed,
    /// Dense convolution of the ±1 tensors (reference path).
    Dense,
}

/// What a parameter slice is, for the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Latent weights under a sign; clipped to `[-1, 1]` after each step.
    LatentBinary,
    Real,
    /// Rotation blend angle.
    Beta,
}

pub struct Param<'a> {
    pub kind: ParamKind,
    pub values: &'a mut [f64],
}

/// A convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub spec: ConvSpec,
    pub binary: bool,
    /// Real weights, or latent weights when `binary`.
    pub weights: Tensor,
    pub rotation: Option<RotationState>,
    pub bn: BatchNorm,
}

/// Convolution output, the signed input, the weights actually used, and the
/// rotation blend (binary units only).
type Convolved = (
    Tensor,
    Option<Tensor>,
    Option<Tensor>,
    Option<AdjustedWeights>,
);

struct ConvBnCache {
    /// The tensor actually convolved (`sign(x)` for binary units).
    input: Tensor,
    /// Pre-sign activation, kept for the straight-through mask.
    raw_input: Option<Tensor>,
    /// Binarized weights actually used, for binary units.
    used_weights: Option<Tensor>,
    adjusted: Option<AdjustedWeights>,
    bn: BnCache,
}

#[derive(Debug, Clone)]
struct ConvBnGrads {
    weights: Tensor,
    beta: Option<f64>,
    gamma: Vec<f64>,
    bn_beta: Vec<f64>,
}

impl ConvBn {
    fn new(spec: ConvSpec, binary: bool, rotate: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        let mut weights = uniform_tensor(&spec.weight_shape(), -bound, bound, rng);
        if binary {
            weights = crate::binary::clip_latent(&weights);
        }
        let rotation = (binary && rotate).then(|| RotationState::identity(spec.weight_len()));
        Self {
            bn: BatchNorm::new(spec.c_out),
            spec,
            binary,
            weights,
            rotation,
        }
    }

    /// Weights entering the convolution: real, `sign(w)`, or `sign(w~)`.
    pub fn effective_weights(&self) -> Result<Tensor> {
        Ok(self.binarized_weights()?.0)
    }

    fn binarized_weights(&self) -> Result<(Tensor, Option<AdjustedWeights>)> {
        if !self.binary {
            return Ok((self.weights.clone(), None));
        }
        match &self.rotation {
            Some(rot) => {
                let adj = adjusted_weights(&self.weights, rot)?;
                Ok((sign(&adj.adjusted), Some(adj)))
            }
            None => Ok((sign(&self.weights), None)),
        }
    }

    fn convolve(&self, x: &Tensor, engine: Engine) -> Result<Convolved> {
        if !self.binary {
            return Ok((
                conv2d_forward(x, &self.spec, &self.weights)?,
                None,
                None,
                None,
            ));
        }
        let xs = sign(x);
        let (ws, adj) = self.binarized_weights()?;
        let out = match engine {
            Engine::Packed => binary_conv2d(
                &BitTensor::from_signs(&xs),
                &BitTensor::from_signs(&ws),
                &self.spec,
            )?,
            Engine::Dense => conv2d_forward(&xs, &self.spec, &ws)?,
        };
        Ok((out, Some(xs), Some(ws), adj))
    }

    pub fn infer(&self, x: &Tensor, engine: Engine) -> Result<Tensor> {
        let (out, ..) = self.convolve(x, engine)?;
        self.bn.infer(&out)
    }

    fn train(&mut self, x: &Tensor, engine: Engine) -> Result<(Tensor, ConvBnCache)> {
        let (out, signed, used_weights, adjusted) = self.convolve(x, engine)?;
        let (y, bn) = self.bn.forward(&out, Mode::Train)?;
        let (input, raw_input) = match signed {
            Some(s) => (s, Some(x.clone())),
            None => (x.clone(), None),
        };
        let cache = ConvBnCache {
            input,
            raw_input,
            used_weights,
            adjusted,
            bn: bn.expect("train-mode batch norm returns a cache"),
        };
        Ok((y, cache))
    }

    fn backward(
        &self,
        upstream: &Tensor,
        cache: &ConvBnCache,
        need_input: bool,
    ) -> Result<(Option<Tensor>, ConvBnGrads)> {
        let (d_conv, gamma, bn_beta) = self.bn.backward(upstream, &cache.bn)?;
        let w_used = cache.used_weights.as_ref().unwrap_or(&self.weights);
        let g = conv2d_backward(&d_conv, &cache.input, &self.spec, w_used, need_input)?;
        let d_input = match (g.input, &cache.raw_input) {
            (Some(gi), Some(raw)) => Some(ste_backward(&gi, raw)?),
            (gi, _) => gi,
        };
        let (weights, beta) = match (&self.rotation, &cache.adjusted) {
            _ if !self.binary => (g.weights, None),
            (Some(rot), Some(adj)) => {
                let masked = ste_backward(&g.weights, &adj.adjusted)?;
                let db = beta_grad(&masked, &self.weights, &adj.rotated, rot.beta)?;
                (weight_grad(&masked, rot)?, Some(db))
            }
            _ => (ste_backward(&g.weights, &self.weights)?, None),
        };
        Ok((
            d_input,
            ConvBnGrads {
                weights,
                beta,
                gamma,
                bn_beta,
            },
        ))
    }

    fn push_params<'a>(&'a mut self, out: &mut Vec<Param<'a>>) {
        let kind = if self.binary {
            ParamKind::LatentBinary
        } else {
            ParamKind::Real
        };
        out.push(Param {
            kind,
            values: self.weights.data_mut(),
        });
        if let Some(rot) = &mut self.rotation {
            out.push(Param {
                kind: ParamKind::Beta,
                values: std::slice::from_mut(&mut rot.beta),
            });
        }
        out.push(Param {
            kind: ParamKind::Real,
            values: &mut self.bn.gamma,
        });
        out.push(Param {
            kind: ParamKind::Real,
            values: &mut self.bn.beta,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

struct BlockCache {
    c1: ConvBnCache,
    z1: Tensor,
    c2: ConvBnCache,
    sc: Option<ConvBnCache>,
    sum: Tensor,
}

impl Block {
    pub fn units(&self) -> impl Iterator<Item = &ConvBn> {
        [&self.conv1, &self.conv2]
            .into_iter()
            .chain(self.shortcut.as_ref())
    }

    pub fn infer(&self, x: &Tensor, engine: Engine) -> Result<Tensor> {
        let a1 = hardtanh(&self.conv1.infer(x, engine)?);
        let z2 = self.conv2.infer(&a1, engine)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.infer(x, engine)?,
            None => x.clone(),
        };
        Ok(hardtanh(&z2.zip_map(&skip, |a, b| a + b)?))
    }

    fn train(&mut self, x: &Tensor, engine: Engine) -> Result<(Tensor, BlockCache)> {
        let (z1, c1) = self.conv1.train(x, engine)?;
        let a1 = hardtanh(&z1);
        let (z2, c2) = self.conv2.train(&a1, engine)?;
        let (skip, sc) = match &mut self.shortcut {
            Some(unit) => {
                let (s, c) = unit.train(x, engine)?;
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let sum = z2.zip_map(&skip, |a, b| a + b)?;
        let out = hardtanh(&sum);
        Ok((
            out,
            BlockCache {
                c1,
                z1,
                c2,
                sc,
                sum,
            },
        ))
    }

    fn backward(
        &self,
        upstream: &Tensor,
        cache: &BlockCache,
    ) -> Result<(Tensor, Vec<ConvBnGrads>)> {
        let d_sum = hardtanh_backward(upstream, &cache.sum)?;
        let (d_a1, g2) = self.conv2.backward(&d_sum, &cache.c2, true)?;
        let d_z1 = hardtanh_backward(&d_a1.expect("input gradient requested"), &cache.z1)?;
        let (d_x, g1) = self.conv1.backward(&d_z1, &cache.c1, true)?;
        let d_x = d_x.expect("input gradient requested");
        let mut grads = vec![g1, g2];
        let d_skip = match (&self.shortcut, &cache.sc) {
            (Some(unit), Some(c)) => {
                let (d, g) = unit.backward(&d_sum, c, true)?;
                grads.push(g);
                d.expect("input gradient requested")
            }
            _ => d_sum,
        };
        Ok((d_x.zip_map(&d_skip, |a, b| a + b)?, grads))
    }
}

/// Global pool, batch norm, dropout and the linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub bn: BatchNorm,
    /// `[num_classes, features]`.
    pub weights: Tensor,
    pub bias: Tensor,
    /// Binarizes weights, bias and input.
    pub binary: bool,
}

struct HeadCache {
    pooled_shape: Vec<usize>,
    features_shape: Vec<usize>,
    bn: BnCache,
    mask: Option<Tensor>,
    /// Classifier input (signed when binary) and its pre-sign value.
    input: Tensor,
    raw_input: Option<Tensor>,
}

struct HeadGrads {
    gamma: Vec<f64>,
    bn_beta: Vec<f64>,
    weights: Tensor,
    bias: Tensor,
}

impl Head {
    fn classifier(&self) -> (Tensor, Tensor) {
        if self.binary {
            (sign(&self.weights), sign(&self.bias))
        } else {
            (self.weights.clone(), self.bias.clone())
        }
    }

    fn infer(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = avgpool_global(features)?;
        let normed = self.bn.infer(&pooled)?;
        let n = normed.shape()[0];
        let flat = normed.reshape(&[n, self.weights.shape()[1]])?;
        let input = if self.binary { sign(&flat) } else { flat };
        let (w, b) = self.classifier();
        linear_forward(&input, &w, &b)
    }

    fn train(
        &mut self,
        features: &Tensor,
        rate: f64,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, HeadCache)> {
        let pooled = avgpool_global(features)?;
        let (normed, bn) = self.bn.forward(&pooled, Mode::Train)?;
        let n = normed.shape()[0];
        let flat = normed.reshape(&[n, self.weights.shape()[1]])?;
        let (dropped, mask) = dropout(&flat, rate, rng, Mode::Train)?;
        let (input, raw_input) = if self.binary {
            (sign(&dropped), Some(dropped))
        } else {
            (dropped, None)
        };
        let (w, b) = self.classifier();
        let logits = linear_forward(&input, &w, &b)?;
        let cache = HeadCache {
            pooled_shape: pooled.shape().to_vec(),
            features_shape: features.shape().to_vec(),
            bn: bn.expect("train-mode batch norm returns a cache"),
            mask,
            input,
            raw_input,
        };
        Ok((logits, cache))
    }

    fn backward(&self, d_logits: &Tensor, cache: &HeadCache) -> Result<(Tensor, HeadGrads)> {
        let (w, _) = self.classifier();
        let g = linear_backward(d_logits, &cache.input, &w)?;
        let d_in = match &cache.raw_input {
            Some(raw) => ste_backward(&g.input, raw)?,
            None => g.input,
        };
        let (weights, bias) = if self.binary {
            (
                ste_backward(&g.weights, &self.weights)?,
                ste_backward(&g.bias, &self.bias)?,
            )
        } else {
            (g.weights, g.bias)
        };
        let d_drop = dropout_backward(&d_in, cache.mask.as_ref())?;
        let d_norm = d_drop.reshape(&cache.pooled_shape)?;
        let (d_pool, gamma, bn_beta) = self.bn.backward(&d_norm, &cache.bn)?;
        let d_features = avgpool_global_backward(&d_pool, &cache.features_shape)?;
        Ok((
            d_features,
            HeadGrads {
                gamma,
                bn_beta,
                weights,
                bias,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub arch: ArchSpec,
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Activations saved by [`Model::forward_train`] for [`Model::backward`].
pub struct Trace {
    stem: ConvBnCache,
    blocks: Vec<BlockCache>,
    head: HeadCache,
}

/// Parameter gradients, one vector per [`Model::params_mut`] entry and in the
/// same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

const INIT_STREAM: u64 = 0x1417;

/// Builds a freshly initialized model; deterministic in `seed`.
pub fn build(variant: ModelVariant, arch: &ArchSpec, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut rng = stream(seed, &[INIT_STREAM]);
    let stem = ConvBn::new(arch.stem(), variant.binarizes_stem(), false, &mut rng);
    let binary = variant.binarizes_blocks();
    let rotate = variant.rotates();
    let blocks = arch
        .blocks
        .iter()
        .map(|&spec| Block {
            spec,
            conv1: ConvBn::new(spec.conv1(), binary, rotate, &mut rng),
            conv2: ConvBn::new(spec.conv2(), binary, rotate, &mut rng),
            shortcut: spec
                .shortcut()
                .map(|s| ConvBn::new(s, binary, rotate, &mut rng)),
        })
        .collect();
    let f = arch.feature_channels();
    let bound = (6.0 / f as f64).sqrt();
    let mut weights = uniform_tensor(&[arch.num_classes, f], -bound, bound, &mut rng);
    let binary_head = variant.binarizes_classifier();
    if binary_head {
        weights = crate::binary::clip_latent(&weights);
    }
    Ok(Model {
        variant,
        arch: arch.clone(),
        stem,
        blocks,
        head: Head {
            bn: BatchNorm::new(f),
            weights,
            bias: Tensor::zeros(&[arch.num_classes]),
            binary: binary_head,
        },
    })
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != self.arch.input_shape(0)[1..] {
            return Err(Error::shape(format!(
                "model input must be [N>0, {}, {}, {}], got {s:?}",
                self.arch.in_channels, self.arch.in_h, self.arch.in_w
            )));
        }
        Ok(())
    }

    /// Conv units in parameter order: stem, then each block's conv1, conv2 and
    /// shortcut.
    pub fn units(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| b.units()))
    }

    pub fn units_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            out.push(&mut b.conv1);
            out.push(&mut b.conv2);
            if let Some(s) = &mut b.shortcut {
                out.push(s);
            }
        }
        out
    }

    /// Inference-mode logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor, engine: Engine) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x, engine)?;
        for b in &self.blocks {
            h = b.infer(&h, engine)?;
        }
        self.head.infer(&h)
    }

    /// Train-mode logits: batch statistics (updating the running averages)
    /// and dropout at `dropout_rate`.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        dropout_rate: f64,
        rng: &mut impl Rng,
        engine: Engine,
    ) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let (mut h, stem) = self.stem.train(x, engine)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (out, cache) = b.train(&h, engine)?;
            blocks.push(cache);
            h = out;
        }
        let (logits, head) = self.head.train(&h, dropout_rate, rng)?;
        Ok((logits, Trace { stem, blocks, head }))
    }

    /// Gradients of a loss with logit gradient `d_logits`.
    pub fn backward(&self, trace: &Trace, d_logits: &Tensor) -> Result<Gradients> {
        let (mut d, head) = self.head.backward(d_logits, &trace.head)?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, cache) in self.blocks.iter().zip(&trace.blocks).rev() {
            let (d_in, g) = b.backward(&d, cache)?;
            block_grads.push(g);
            d = d_in;
        }
        block_grads.reverse();
        let (_, stem) = self.stem.backward(&d, &trace.stem, false)?;

        let mut out = Vec::new();
        for g in std::iter::once(stem).chain(block_grads.into_iter().flatten()) {
            out.push(g.weights.into_data());
            if let Some(b) = g.beta {
                out.push(vec![b]);
            }
            out.push(g.gamma);
            out.push(g.bn_beta);
        }
        out.push(head.gamma);
        out.push(head.bn_beta);
        out.push(head.weights.into_data());
        out.push(head.bias.into_data());
        Ok(Gradients(out))
    }

    /// Every trainable parameter slice, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        let Model {
            stem, blocks, head, ..
        } = self;
        stem.push_params(&mut out);
        for b in blocks {
            b.conv1.push_params(&mut out);
            b.conv2.push_params(&mut out);
            if let Some(s) = &mut b.shortcut {
                s.push_params(&mut out);
            }
        }
        let latent = if head.binary {
            ParamKind::LatentBinary
        } else {
            ParamKind::Real
        };
        out.push(Param {
            kind: ParamKind::Real,
            values: &mut head.bn.gamma,
        });
        out.push(Param {
            kind: ParamKind::Real,
            values: &mut head.bn.beta,
        });
        out.push(Param {
            kind: latent,
            values: head.weights.data_mut(),
        });
        out.push(Param {
            kind: latent,
            values: head.bias.data_mut(),
        });
        out
    }

    /// Sizes of the [`Model::params_mut`] slices.
    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|p| p.values.len()).collect()
    }

    pub fn analyze(&self, rules: CountingRules) -> Result<ComplexityReport> {
        analyze(&self.arch, self.variant, rules)
    }
}
