//! The per-scale generators and the coarse-to-fine recursion of each branch.
//!
//! Scale `n` counts from the finest level (`0`) to the coarsest (`N`). At the
//! coarsest scale a generator sees only noise; at every finer scale it sees
//! noise plus the upsampled previous output, and its own output is added
//! back onto that upsampled image.

use mogan_autograd::{no_grad, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentDescriptor};
use crate::blocks::{
    modulate, Activation, BlockConfig, Conv2d, ConvLayer, GatedConv2d, MarkovianDiscriminator, Norm, NormKind, ResBlock,
    StyleInjector,
};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::params::{self, Init, Module};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Roi,
    Background,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Roi => "roi",
            BranchKind::Background => "background",
        }
    }
}

/// Counts of the optional components in one generator.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub resblocks: usize,
    pub injectors: usize,
    pub deformable_convs: usize,
    pub gated_convs: usize,
    pub plain_convs: usize,
    pub attention_layers: usize,
}

/// Head convolution, residual blocks, then norm, activation, tail
/// convolution and `tanh`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub head: ConvLayer,
    pub blocks: Vec<ResBlock>,
    pub tail_norm: Norm,
    pub tail: ConvLayer,
    pub activation: Activation,
}

impl Generator {
    pub fn new(init: &mut Init, kind: BranchKind, cfg: &BlockConfig) -> Self {
        let (c, k) = (cfg.base_channels, cfg.kernel_size);
        let gated = kind == BranchKind::Background && cfg.gated_enabled;
        let conv = |init: &mut Init, c_in, c_out| {
            if gated {
                ConvLayer::Gated(GatedConv2d::new(init, c_in, c_out, k))
            } else {
                ConvLayer::Plain(Conv2d::new(init, c_in, c_out, k, 1))
            }
        };
        let head = conv(init, 3, c);
        let blocks = (0..cfg.num_resblocks)
            .map(|_| match kind {
                BranchKind::Roi => ResBlock::roi(init, cfg),
                BranchKind::Background => ResBlock::background(init, cfg),
            })
            .collect();
        let (norm_kind, activation) = match kind {
            BranchKind::Roi => (NormKind::Batch, Activation::LeakyRelu(0.2)),
            BranchKind::Background => (NormKind::Instance, Activation::Elu),
        };
        let tail_norm = Norm::new(init, c, norm_kind);
        let tail = conv(init, c, 3);
        Generator { head, blocks, tail_norm, tail, activation }
    }

    /// The residual image `tanh(...)`. `styles`, when given, holds one
    /// injector per block and modulates the block's input.
    pub fn forward(&self, input: &Tensor, injectors: &[StyleInjector], style_image: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.head.forward(input)?;
        let style_image = match (injectors.is_empty(), style_image) {
            (true, _) => None,
            (false, Some(img)) => Some(img),
            (false, None) => return Err(Error::InvalidArgument("style injectors need an augmented image".into())),
        };
        if style_image.is_some() && injectors.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} injectors for {} residual blocks",
                injectors.len(),
                self.blocks.len()
            )));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(img) = style_image {
                let s = h.shape();
                let style = injectors[i].forward(img, (s[0], s[1], s[2]))?;
                h = modulate(&h, &style)?;
            }
            h = block.forward(&h)?;
        }
        let h = self.activation.apply(&self.tail_norm.forward(&h)?);
        Ok(self.tail.forward(&h)?.tanh())
    }

    pub fn summary(&self, injectors: usize) -> ArchitectureSummary {
        let mut s = ArchitectureSummary { resblocks: self.blocks.len(), injectors, ..Default::default() };
        let mut count = |c: &ConvLayer| match c {
            ConvLayer::Plain(_) => s.plain_convs += 1,
            ConvLayer::Gated(_) => s.gated_convs += 1,
            ConvLayer::Deform(_) => s.deformable_convs += 1,
        };
        count(&self.head);
        for b in &self.blocks {
            count(&b.conv1);
            count(&b.conv2);
        }
        count(&self.tail);
        s.attention_layers = self.blocks.iter().filter(|b| b.attention.is_some()).count();
        s
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.head.visit(f);
        self.blocks.visit(f);
        self.tail_norm.visit(f);
        self.tail.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.head.visit_mut(f);
        self.blocks.visit_mut(f);
        self.tail_norm.visit_mut(f);
        self.tail.visit_mut(f);
    }
}

/// One rung of a branch: generator, critic, style injectors (ROI only).
#[derive(Clone, Debug)]
pub struct ScaleModel {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub generator: Generator,
    pub injectors: Vec<StyleInjector>,
    pub discriminator: MarkovianDiscriminator,
    pub noise_amp: f64,
    pub frozen: bool,
}

impl ScaleModel {
    pub fn new(init: &mut Init, kind: BranchKind, cfg: &BlockConfig, index: usize, dims: (usize, usize)) -> Self {
        let generator = Generator::new(init, kind, cfg);
        let injectors = if kind == BranchKind::Roi && cfg.injector_enabled {
            (0..cfg.num_resblocks)
                .map(|_| StyleInjector::new(init, cfg.base_channels, cfg.kernel_size, cfg.injector_damping))
                .collect()
        } else {
            Vec::new()
        };
        let discriminator = MarkovianDiscriminator::new(init, cfg);
        ScaleModel {
            index,
            height: dims.0,
            width: dims.1,
            generator,
            injectors,
            discriminator,
            noise_amp: 1.0,
            frozen: false,
        }
    }

    /// The residual produced for `input` under the given style image.
    pub fn residual(&self, input: &Tensor, style_image: Option<&Tensor>) -> Result<Tensor> {
        self.generator.forward(input, &self.injectors, style_image)
    }

    /// Constant `f32`-exact parameters, no further updates.
    pub fn freeze(&mut self) {
        params::freeze(&mut self.generator);
        params::freeze(&mut self.injectors);
        params::freeze(&mut self.discriminator);
        self.frozen = true;
    }

    pub fn make_trainable(&mut self) {
        params::make_trainable(&mut self.generator);
        params::make_trainable(&mut self.injectors);
        params::make_trainable(&mut self.discriminator);
        self.frozen = false;
    }

    /// Digest over generator, injector and critic parameters.
    pub fn digest(&self) -> String {
        params::digest_bytes(
            format!(
                "{}{}{}",
                params::digest(&self.generator),
                params::digest(&self.injectors),
                params::digest(&self.discriminator)
            )
            .as_bytes(),
        )
    }

    pub fn summary(&self) -> ArchitectureSummary {
        self.generator.summary(self.injectors.len())
    }
}

/// Noise source for one generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum NoiseSpec {
    /// Fresh Gaussian noise at every scale, reproducible from the seed.
    Seeded(u64),
    /// No noise at any scale.
    Zero,
    /// The fixed reconstruction anchors of the stack.
    Reconstruction,
}

/// Standard normal noise for a scale; one channel broadcast to RGB at the
/// coarsest scale, independent channels elsewhere.
pub fn sample_noise(rng: &mut impl Rng, coarsest: bool, height: usize, width: usize) -> Tensor {
    let plane = height * width;
    let data: Vec<f64> = if coarsest {
        let one: Vec<f64> = (0..plane).map(|_| rng.sample(StandardNormal)).collect();
        one.iter().cycle().take(3 * plane).copied().collect()
    } else {
        (0..3 * plane).map(|_| rng.sample(StandardNormal)).collect()
    };
    Tensor::new(data, &[3, height, width])
}

/// What the style injectors see at each scale.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'a> {
    /// The unmodified training image.
    Identity,
    Augment(&'a AugmentDescriptor),
    /// An edited image pyramid (indexed by scale) used at scales `>= min_scale`;
    /// finer scales fall back to the training image.
    Edited { pyramid: &'a [Image], min_scale: usize },
}

#[derive(Clone, Debug)]
pub struct BranchStack {
    pub kind: BranchKind,
    /// Training images per scale, index 0 finest. Background pyramids are
    /// already masked.
    pub pyramid: Vec<Image>,
    /// Visibility masks per scale (background only).
    pub masks: Option<Vec<Mask>>,
    pub config: BlockConfig,
    pub seed: u64,
    /// Trained scales, coarsest first.
    pub scales: Vec<ScaleModel>,
    anchors: Vec<Tensor>,
}

impl BranchStack {
    pub fn new(kind: BranchKind, pyramid: Vec<Image>, masks: Option<Vec<Mask>>, config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if pyramid.is_empty() {
            return Err(Error::Pyramid("empty pyramid".into()));
        }
        if let Some(m) = &masks {
            if m.len() != pyramid.len() || m.iter().zip(&pyramid).any(|(m, p)| m.dims() != p.dims()) {
                return Err(Error::DimensionMismatch("mask pyramid does not match image pyramid".into()));
            }
        }
        if kind == BranchKind::Background && masks.is_none() {
            return Err(Error::InvalidArgument("background branch needs masks".into()));
        }
        let coarsest = pyramid.len() - 1;
        let anchors = pyramid
            .iter()
            .enumerate()
            .map(|(n, img)| {
                if n == coarsest {
                    let mut rng = rng_for(seed, "anchor", &[]);
                    params::quantize(&sample_noise(&mut rng, true, img.height(), img.width()))
                } else {
                    Tensor::zeros(&[3, img.height(), img.width()])
                }
            })
            .collect();
        Ok(BranchStack { kind, pyramid, masks, config, seed, scales: Vec::new(), anchors })
    }

    pub fn coarsest(&self) -> usize {
        self.pyramid.len() - 1
    }

    pub fn dims(&self, n: usize) -> (usize, usize) {
        self.pyramid[n].dims()
    }

    pub fn model(&self, n: usize) -> Option<&ScaleModel> {
        self.coarsest().checked_sub(n).and_then(|i| self.scales.get(i))
    }

    pub fn model_mut(&mut self, n: usize) -> Option<&mut ScaleModel> {
        let i = self.coarsest().checked_sub(n)?;
        self.scales.get_mut(i)
    }

    /// Finest scale trained so far.
    pub fn finest_trained(&self) -> Option<usize> {
        self.scales.last().map(|m| m.index)
    }

    /// Next scale awaiting training.
    pub fn next_untrained(&self) -> Option<usize> {
        match self.finest_trained() {
            None => Some(self.coarsest()),
            Some(0) => None,
            Some(n) => Some(n - 1),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.finest_trained() == Some(0) && self.scales.iter().all(|m| m.frozen)
    }

    pub fn anchor(&self, n: usize) -> &Tensor {
        &self.anchors[n]
    }

    pub fn target(&self, n: usize) -> Tensor {
        self.pyramid[n].to_tensor()
    }

    pub fn mask_tensor(&self, n: usize) -> Option<Tensor> {
        self.masks.as_ref().map(|m| m[n].to_tensor())
    }

    /// Digests of every trained scale, coarsest first.
    pub fn digests(&self) -> Vec<String> {
        self.scales.iter().map(|m| m.digest()).collect()
    }

    /// Noise for scale `n` under `spec`, before amplitude scaling.
    pub fn noise(&self, spec: &NoiseSpec, n: usize) -> Tensor {
        let (h, w) = self.dims(n);
        match spec {
            NoiseSpec::Seeded(seed) => {
                let mut rng = rng_for(*seed, "noise", &[n as u64]);
                sample_noise(&mut rng, n == self.coarsest(), h, w)
            }
            NoiseSpec::Zero => Tensor::zeros(&[3, h, w]),
            NoiseSpec::Reconstruction => self.anchors[n].clone(),
        }
    }

    /// The style image at scale `n`, or `None` for stacks without injectors.
    pub fn style_image(&self, style: &StyleSource<'_>, n: usize) -> Result<Option<Tensor>> {
        if self.kind != BranchKind::Roi || !self.config.injector_enabled {
            return Ok(None);
        }
        let base = &self.pyramid[n];
        let img = match style {
            StyleSource::Identity => base.clone(),
            StyleSource::Augment(d) => augment::apply(base, d)?,
            StyleSource::Edited { pyramid, min_scale } if n >= *min_scale => {
                let e = pyramid.get(n).ok_or_else(|| Error::DimensionMismatch(format!("edited pyramid lacks scale {n}")))?;
                if e.dims() != base.dims() {
                    return Err(Error::DimensionMismatch(format!("edited scale {n} is {:?}, expected {:?}", e.dims(), base.dims())));
                }
                e.clone()
            }
            StyleSource::Edited { .. } => base.clone(),
        };
        Ok(Some(img.to_tensor()))
    }

    /// Upsamples the previous scale's output to scale `n`; zeros at the
    /// coarsest scale.
    pub fn upsample_prev(&self, prev: Option<&Tensor>, n: usize) -> Tensor {
        let (h, w) = self.dims(n);
        match prev {
            Some(p) => p.resize_bilinear(h, w),
            None => Tensor::zeros(&[3, h, w]),
        }
    }

    /// One step of the recursion at scale `n`.
    pub fn step(&self, model: &ScaleModel, prev: Option<&Tensor>, noise: &Tensor, style_image: Option<&Tensor>) -> Result<Tensor> {
        let up = self.upsample_prev(prev, model.index);
        let input = noise.mul_scalar(model.noise_amp).add(&up);
        Ok(model.residual(&input, style_image)?.add(&up))
    }

    /// Output of every scale from the coarsest down to `stop_scale`, in
    /// that order, in internal `[-1, 1]` units.
    pub fn generate_trace(&self, noise: &NoiseSpec, style: &StyleSource<'_>, stop_scale: usize) -> Result<Vec<(usize, Tensor)>> {
        if stop_scale > self.coarsest() {
            return Err(Error::InvalidArgument(format!("stop scale {stop_scale} beyond coarsest {}", self.coarsest())));
        }
        no_grad(|| {
            let mut trace: Vec<(usize, Tensor)> = Vec::new();
            for n in (stop_scale..=self.coarsest()).rev() {
                let model = self.model(n).ok_or(Error::UntrainedScale(n))?;
                let z = self.noise(noise, n);
                let style_img = self.style_image(style, n)?;
                let out = self.step(model, trace.last().map(|(_, t)| t), &z, style_img.as_ref())?;
                trace.push((n, out));
            }
            Ok(trace)
        })
    }

    /// Runs trained scales from the coarsest down to `stop_scale` and
    /// returns the internal `[-1, 1]` output at `stop_scale`.
    pub fn generate_tensor(&self, noise: &NoiseSpec, style: &StyleSource<'_>, stop_scale: usize) -> Result<Tensor> {
        let mut trace = self.generate_trace(noise, style, stop_scale)?;
        Ok(trace.pop().expect("at least one scale").1)
    }

    pub fn generate(&self, noise: &NoiseSpec, style: &StyleSource<'_>, stop_scale: usize) -> Result<Image> {
        Image::from_tensor(&self.generate_tensor(noise, style, stop_scale)?)
    }

    /// Resizes `edited` (at finest resolution) to every scale.
    pub fn edited_pyramid(&self, edited: &Image) -> Result<Vec<Image>> {
        if edited.dims() != self.dims(0) {
            return Err(Error::DimensionMismatch(format!("edited image is {:?}, expected {:?}", edited.dims(), self.dims(0))));
        }
        Ok((0..self.pyramid.len())
            .map(|n| {
                let (h, w) = self.dims(n);
                if n == 0 { edited.clone() } else { edited.resize(h, w) }
            })
            .collect())
    }
}

/// ROI recursion with an augmentation driving the style injectors.
pub fn roi_generate(stack: &BranchStack, noise: &NoiseSpec, aug: &AugmentDescriptor, stop_scale: usize) -> Result<Image> {
    if stack.kind != BranchKind::Roi {
        return Err(Error::InvalidArgument("roi_generate needs an ROI stack".into()));
    }
    stack.generate(noise, &StyleSource::Augment(aug), stop_scale)
}

pub fn background_generate(stack: &BranchStack, noise: &NoiseSpec, stop_scale: usize) -> Result<Image> {
    if stack.kind != BranchKind::Background {
        return Err(Error::InvalidArgument("background_generate needs a background stack".into()));
    }
    stack.generate(noise, &StyleSource::Identity, stop_scale)
}

/// Generation with an edited image fed to the injectors at scales
/// `>= min_scale`. The stack must be fully trained and frozen.
pub fn inject_edit(stack: &BranchStack, edited: &Image, noise: &NoiseSpec, min_scale: usize) -> Result<Image> {
    if stack.kind != BranchKind::Roi {
        return Err(Error::InvalidArgument("inject_edit needs an ROI stack".into()));
    }
    if !stack.is_complete() {
        return Err(Error::NotFrozen);
    }
    let pyramid = stack.edited_pyramid(edited)?;
    stack.generate(noise, &StyleSource::Edited { pyramid: &pyramid, min_scale }, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentKind;
    use crate::imaging::{build_pyramid, PyramidSpec, RoiBox};

    pub(crate) fn tiny_config() -> BlockConfig {
        BlockConfig { base_channels: 4, num_resblocks: 2, ..BlockConfig::default() }
    }

    fn toy(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3).cos()))
    }

    /// A stack with untrained but frozen scales, enough to exercise the recursion.
    fn frozen_stack(kind: BranchKind) -> BranchStack {
        let img = toy(30, 34);
        let spec = PyramidSpec { num_scales: Some(2), min_coarse_dim: 11, ..PyramidSpec::default() };
        let pyramid = build_pyramid(&img, &spec).unwrap();
        let masks = (kind == BranchKind::Background).then(|| {
            pyramid
                .iter()
                .enumerate()
                .map(|(n, p)| {
                    let b = RoiBox::new(8, 8, 20, 18).rescaled(spec.rescale_factor.powi(n as i32), p.height(), p.width());
                    Mask::from_boxes(p.height(), p.width(), &[b])
                })
                .collect()
        });
        let mut stack = BranchStack::new(kind, pyramid, masks, tiny_config(), 5).unwrap();
        let mut init = Init::new(9);
        for n in (0..=stack.coarsest()).rev() {
            let mut m = ScaleModel::new(&mut init, kind, &stack.config, n, stack.dims(n));
            m.noise_amp = 0.1;
            m.freeze();
            stack.scales.push(m);
        }
        stack
    }

    #[test]
    fn output_dims_follow_pyramid() {
        for kind in [BranchKind::Roi, BranchKind::Background] {
            let stack = frozen_stack(kind);
            for n in 0..=stack.coarsest() {
                let out = stack.generate(&NoiseSpec::Seeded(1), &StyleSource::Identity, n).unwrap();
                assert_eq!(out.dims(), stack.dims(n));
                let trace = stack.generate_trace(&NoiseSpec::Seeded(1), &StyleSource::Identity, n).unwrap();
                let visited: Vec<usize> = trace.iter().map(|(k, _)| *k).collect();
                assert_eq!(visited, (n..=stack.coarsest()).rev().collect::<Vec<_>>());
                for (k, t) in &trace {
                    let (h, w) = stack.dims(*k);
                    assert_eq!(t.shape(), &[3, h, w]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_dependent() {
        let stack = frozen_stack(BranchKind::Roi);
        let aug = AugmentDescriptor::new(AugmentKind::Rotation, 0.5, 3).unwrap();
        let a = roi_generate(&stack, &NoiseSpec::Seeded(7), &aug, 0).unwrap();
        assert_eq!(a, roi_generate(&stack, &NoiseSpec::Seeded(7), &aug, 0).unwrap());
        assert_ne!(a, roi_generate(&stack, &NoiseSpec::Seeded(8), &aug, 0).unwrap());
        let bg = frozen_stack(BranchKind::Background);
        assert_eq!(background_generate(&bg, &NoiseSpec::Seeded(2), 0).unwrap(), background_generate(&bg, &NoiseSpec::Seeded(2), 0).unwrap());
        assert!(background_generate(&stack, &NoiseSpec::Zero, 0).is_err());
    }

    #[test]
    fn untrained_scale_is_an_error() {
        let mut stack = frozen_stack(BranchKind::Roi);
        stack.scales.pop();
        assert!(matches!(stack.generate(&NoiseSpec::Zero, &StyleSource::Identity, 0), Err(Error::UntrainedScale(0))));
        assert!(stack.generate(&NoiseSpec::Zero, &StyleSource::Identity, 1).is_ok());
        assert!(matches!(inject_edit(&stack, &stack.pyramid[0].clone(), &NoiseSpec::Zero, 0), Err(Error::NotFrozen)));
    }

    #[test]
    fn edits_leave_parameters_untouched_and_change_output() {
        let stack = frozen_stack(BranchKind::Roi);
        let before = stack.digests();
        let original = stack.pyramid[0].clone();
        let plain = inject_edit(&stack, &original, &NoiseSpec::Seeded(4), 0).unwrap();
        assert_eq!(plain, stack.generate(&NoiseSpec::Seeded(4), &StyleSource::Identity, 0).unwrap());
        let mut edited = original.clone();
        for y in 5..15 {
            for x in 5..15 {
                for c in 0..3 {
                    edited.set(y, x, c, 1.0 - original.get(y, x, c));
                }
            }
        }
        let changed = inject_edit(&stack, &edited, &NoiseSpec::Seeded(4), 0).unwrap();
        assert_ne!(changed, plain);
        assert_eq!(stack.digests(), before);
    }

    #[test]
    fn noise_layout() {
        let stack = frozen_stack(BranchKind::Roi);
        let top = stack.noise(&NoiseSpec::Seeded(1), stack.coarsest());
        let plane = top.numel() / 3;
        assert_eq!(top.data()[..plane], top.data()[plane..2 * plane]);
        let fine = stack.noise(&NoiseSpec::Seeded(1), 0);
        let plane = fine.numel() / 3;
        assert_ne!(fine.data()[..plane], fine.data()[plane..2 * plane]);
        assert!(stack.noise(&NoiseSpec::Reconstruction, 0).data().iter().all(|&v| v == 0.0));
        assert!(stack.noise(&NoiseSpec::Reconstruction, stack.coarsest()).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ablations_change_architecture() {
        let mut init = Init::new(0);
        let full = ScaleModel::new(&mut init, BranchKind::Roi, &tiny_config(), 0, (12, 12)).summary();
        assert_eq!((full.injectors, full.deformable_convs, full.attention_layers), (2, 2, 2));
        let base_cfg = BlockConfig { injector_enabled: false, deform_enabled: false, attention_enabled: false, ..tiny_config() };
        let base = ScaleModel::new(&mut init, BranchKind::Roi, &base_cfg, 0, (12, 12)).summary();
        assert_eq!((base.injectors, base.deformable_convs, base.attention_layers), (0, 0, 0));
        let bg = ScaleModel::new(&mut init, BranchKind::Background, &tiny_config(), 0, (12, 12)).summary();
        assert_eq!((bg.injectors, bg.gated_convs, bg.plain_convs), (0, 6, 0));
    }
}
