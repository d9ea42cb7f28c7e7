//! Coarse-to-fine training of one branch.
//!
//! Each scale is an independent GAN: a fresh generator (warm-started from
//! the scale above), a fresh critic and fresh Adam state. The scale trains
//! for `iters_per_scale` iterations of `d_steps` critic updates followed by
//! `g_steps` generator updates, then freezes.

use std::io::Write;
use std::sync::Mutex;

use mogan_autograd::{grad, no_grad, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_descriptor, AugmentDescriptor, AugmentKind};
use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::generators::{sample_noise, BranchKind, BranchStack, ScaleModel, StyleSource};
use crate::imaging::{Image, PyramidSpec};
use crate::losses::{
    adversarial_losses, cosine_loss, discriminator_total, generator_total, gradient_penalty, mse_loss, LossSchedule,
    PenaltyPoint,
};
use crate::params::{Adam, AdamConfig, Init, Module};
use crate::seed::{derive_seed, rng_for};

/// Components removed for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disable_deformable: bool,
    pub disable_channel_attention: bool,
    pub disable_style_injector: bool,
    pub disable_gated_conv: bool,
}

/// The ablation settings compared in the evaluation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Every added component removed: plain multi-scale GAN branches.
    Baseline,
    NoDeformable,
    NoChannelAttention,
    NoStyleInjector,
    NoGatedConv,
    Full,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 6] = [
        AblationPreset::Baseline,
        AblationPreset::NoDeformable,
        AblationPreset::NoChannelAttention,
        AblationPreset::NoStyleInjector,
        AblationPreset::NoGatedConv,
        AblationPreset::Full,
    ];

    /// Presets compared for the ROI branch.
    pub const ROI_TABLE: [AblationPreset; 5] = [
        AblationPreset::Baseline,
        AblationPreset::NoDeformable,
        AblationPreset::NoChannelAttention,
        AblationPreset::NoStyleInjector,
        AblationPreset::Full,
    ];

    /// Presets compared for the background branch.
    pub const BACKGROUND_TABLE: [AblationPreset; 4] =
        [AblationPreset::Baseline, AblationPreset::NoGatedConv, AblationPreset::NoChannelAttention, AblationPreset::Full];

    pub fn flags(self) -> AblationFlags {
        let none = AblationFlags::default();
        match self {
            AblationPreset::Baseline => AblationFlags {
                disable_deformable: true,
                disable_channel_attention: true,
                disable_style_injector: true,
                disable_gated_conv: true,
            },
            AblationPreset::NoDeformable => AblationFlags { disable_deformable: true, ..none },
            AblationPreset::NoChannelAttention => AblationFlags { disable_channel_attention: true, ..none },
            AblationPreset::NoStyleInjector => AblationFlags { disable_style_injector: true, ..none },
            AblationPreset::NoGatedConv => AblationFlags { disable_gated_conv: true, ..none },
            AblationPreset::Full => none,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Baseline => "baseline",
            AblationPreset::NoDeformable => "no_deformable",
            AblationPreset::NoChannelAttention => "no_channel_attention",
            AblationPreset::NoStyleInjector => "no_style_injector",
            AblationPreset::NoGatedConv => "no_gated_conv",
            AblationPreset::Full => "full",
        }
    }
}

impl AblationFlags {
    pub fn apply(&self, base: &BlockConfig) -> BlockConfig {
        BlockConfig {
            deform_enabled: base.deform_enabled && !self.disable_deformable,
            attention_enabled: base.attention_enabled && !self.disable_channel_attention,
            injector_enabled: base.injector_enabled && !self.disable_style_injector,
            gated_enabled: base.gated_enabled && !self.disable_gated_conv,
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 200 iterations per scale; trains a 64x64 image on one CPU core.
    Desk,
    /// 2000 iterations per scale.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::InvalidArgument(format!("unknown profile `{s}`; expected desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub iters_per_scale: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub losses: LossSchedule,
    pub penalty_point: PenaltyPoint,
    pub ablation: AblationFlags,
    pub blocks: BlockConfig,
    pub pyramid: PyramidSpec,
    /// Noise amplitude at finer scales, as a multiple of the RMSE between
    /// the upsampled coarser reconstruction and the scale's target.
    pub noise_amp_ratio: f64,
    /// Initialize each scale from the trained scale above it.
    pub warm_start: bool,
    pub seed: u64,
    /// Fusion band width for generated samples.
    pub band_px: usize,
    /// Edited images drive the injectors at scales `>= edit_min_scale`.
    pub edit_min_scale: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            iters_per_scale: 2000,
            d_steps: 3,
            g_steps: 3,
            losses: LossSchedule::default(),
            penalty_point: PenaltyPoint::Interpolate,
            ablation: AblationFlags::default(),
            blocks: BlockConfig::default(),
            pyramid: PyramidSpec::default(),
            noise_amp_ratio: 0.1,
            warm_start: true,
            seed: 0,
            band_px: 3,
            edit_min_scale: 0,
        }
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => TrainConfig { iters_per_scale: 200, ..TrainConfig::default() },
            Profile::Paper => TrainConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self::profile(Profile::Desk)
    }

    pub fn with_preset(mut self, preset: AblationPreset) -> Self {
        self.ablation = preset.flags();
        self
    }

    /// Block configuration for a branch after ablation.
    pub fn branch_blocks(&self, kind: BranchKind) -> BlockConfig {
        let b = self.ablation.apply(&self.blocks);
        match kind {
            BranchKind::Roi => BlockConfig { gated_enabled: false, ..b },
            BranchKind::Background => BlockConfig { injector_enabled: false, deform_enabled: false, ..b },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if self.iters_per_scale == 0 {
            return Err(Error::InvalidArgument("iters_per_scale must be at least 1".into()));
        }
        if !(self.noise_amp_ratio >= 0.0 && self.noise_amp_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_amp_ratio {} must be non-negative", self.noise_amp_ratio)));
        }
        self.losses.validate()?;
        self.blocks.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub branch: String,
    pub scale: usize,
    pub step: usize,
    pub l0_g: f64,
    pub l0_d: f64,
    pub l1: f64,
    pub l2: f64,
    pub gp: f64,
}

/// Receives training events; may be called from several branch threads.
pub trait ProgressSink: Sync {
    fn record(&self, record: &ProgressRecord);

    /// Called after scale `scale` of `branch` has been frozen.
    fn scale_frozen(&self, _branch: &str, _scale: usize, _stack: &BranchStack) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl ProgressSink for NullSink {
    fn record(&self, _: &ProgressRecord) {}
}

/// Collects records in memory.
#[derive(Default)]
pub struct MemorySink(pub Mutex<Vec<ProgressRecord>>);

impl MemorySink {
    pub fn records(&self) -> Vec<ProgressRecord> {
        self.0.lock().expect("sink poisoned").clone()
    }
}

impl ProgressSink for MemorySink {
    fn record(&self, record: &ProgressRecord) {
        self.0.lock().expect("sink poisoned").push(record.clone());
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write + Send>(pub Mutex<W>);

impl<W: Write + Send> JsonlSink<W> {
    pub fn new(w: W) -> Self {
        JsonlSink(Mutex::new(w))
    }
}

impl<W: Write + Send> ProgressSink for JsonlSink<W> {
    fn record(&self, record: &ProgressRecord) {
        let mut w = self.0.lock().expect("sink poisoned");
        if let Ok(line) = serde_json::to_string(record) {
            if let Err(e) = writeln!(w, "{line}") {
                log::warn!("progress log write failed: {e}");
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scales_trained: Vec<usize>,
    pub optimizer_updates: usize,
}

/// Trains every remaining scale of `stack`, coarsest first.
pub fn train_branch(stack: &mut BranchStack, label: &str, cfg: &TrainConfig, sink: &dyn ProgressSink) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    while let Some(n) = stack.next_untrained() {
        report.optimizer_updates += train_next_scale(stack, label, cfg, sink)?;
        report.scales_trained.push(n);
        sink.scale_frozen(label, n, stack)?;
    }
    Ok(report)
}

/// Maps `[-1, 1]` to `[0, 1]`.
fn unit_range(t: &Tensor) -> Tensor {
    t.add_scalar(1.0).mul_scalar(0.5)
}

/// Hidden pixels replaced by the value of a zeroed pixel.
fn apply_mask(t: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        Some(m) => t.mul(m).add(m).add_scalar(-1.0),
        None => t.clone(),
    }
}

/// Cosine and MSE terms of a reconstruction against the scale's target, in
/// `[0, 1]` units and restricted to visible pixels.
pub fn reconstruction_losses(rec: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (r, t) = (unit_range(rec), unit_range(target));
    let l1 = match mask {
        Some(m) => cosine_loss(&r.mul(m), &t.mul(m))?,
        None => cosine_loss(&r, &t)?,
    };
    let l2 = mse_loss(&r, &t, mask)?;
    Ok((l1, l2))
}

/// Generates with the reconstruction anchors and identity augmentation and
/// scores the result against scale `n`'s target.
pub fn reconstruction_pass(stack: &BranchStack, n: usize) -> Result<(Image, f64, f64)> {
    let rec = stack.generate_tensor(&crate::generators::NoiseSpec::Reconstruction, &StyleSource::Identity, n)?;
    let (l1, l2) = reconstruction_losses(&rec, &stack.target(n), stack.mask_tensor(n).as_ref())?;
    Ok((Image::from_tensor(&rec)?, l1.item(), l2.item()))
}

fn finite(v: f64, scale: usize, step: usize, term: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { scale, step, term })
    }
}

/// Trains the next untrained scale and freezes it. Returns the number of
/// optimizer updates performed.
pub fn train_next_scale(stack: &mut BranchStack, label: &str, cfg: &TrainConfig, sink: &dyn ProgressSink) -> Result<usize> {
    let n = stack.next_untrained().ok_or_else(|| Error::InvalidArgument("every scale is already trained".into()))?;
    let kind = stack.kind;
    let coarsest = stack.coarsest();
    let (h, w) = stack.dims(n);
    let mut rng = rng_for(stack.seed, "train", &[n as u64]);
    let mut init = Init::new(derive_seed(stack.seed, "init", &[n as u64]));
    let mut model = ScaleModel::new(&mut init, kind, &stack.config, n, (h, w));
    if cfg.warm_start {
        if let Some(prev) = stack.model(n + 1) {
            model.generator = prev.generator.clone();
            model.injectors = prev.injectors.clone();
            model.discriminator = prev.discriminator.clone();
            model.make_trainable();
        }
    }

    let target = stack.target(n);
    let mask = stack.mask_tensor(n);
    let mask = mask.as_ref();
    let weights = cfg.losses.weights(kind, n, coarsest);

    // Fixed reconstruction input from the frozen scales above.
    let rec_up = if n == coarsest {
        Tensor::zeros(&[3, h, w])
    } else {
        let prev = stack.generate_tensor(&crate::generators::NoiseSpec::Reconstruction, &StyleSource::Identity, n + 1)?;
        prev.resize_bilinear(h, w)
    };
    model.noise_amp = if n == coarsest {
        1.0
    } else {
        let rmse = mse_loss(&rec_up, &target, mask)?.item().sqrt();
        cfg.noise_amp_ratio * rmse
    };
    let anchor_input = stack.anchor(n).mul_scalar(model.noise_amp).add(&rec_up);
    let identity_style = stack.style_image(&StyleSource::Identity, n)?;
    let uses_style = !model.injectors.is_empty();

    let mut g_opt = Adam::new(cfg.adam);
    let mut si_opt = Adam::new(cfg.adam);
    let mut d_opt = Adam::new(cfg.adam);
    let mut updates = 0;

    for step in 0..cfg.iters_per_scale {
        let desc = if uses_style {
            sample_descriptor(rng.random(), &AugmentKind::TRAINING)?
        } else {
            AugmentDescriptor::identity()
        };
        let style = StyleSource::Augment(&desc);
        let style_img = stack.style_image(&style, n)?;
        let rand_up = if n == coarsest {
            Tensor::zeros(&[3, h, w])
        } else {
            let seed = rng.random();
            stack.generate_tensor(&crate::generators::NoiseSpec::Seeded(seed), &style, n + 1)?.resize_bilinear(h, w)
        };

        let (mut l0_d, mut gp_v) = (0.0, 0.0);
        for _ in 0..cfg.d_steps {
            let z = sample_noise(&mut rng, n == coarsest, h, w);
            let fake = no_grad(|| -> Result<Tensor> {
                let input = z.mul_scalar(model.noise_amp).add(&rand_up);
                Ok(model.residual(&input, style_img.as_ref())?.add(&rand_up))
            })?;
            let fake = apply_mask(&fake, mask);
            let d = &model.discriminator;
            let (_, l0) = adversarial_losses(&d.forward(&target)?, &d.forward(&fake)?);
            let gp = gradient_penalty(d, &target, &fake, rng.random(), cfg.penalty_point).map_err(|e| match e {
                Error::NonFiniteGradient(term) => Error::NonFiniteLoss { scale: n, step, term },
                e => e,
            })?;
            let total = discriminator_total(&l0, &gp, &weights);
            l0_d = finite(l0.item(), n, step, "l0_d")?;
            gp_v = finite(gp.item(), n, step, "gp")?;
            finite(total.item(), n, step, "discriminator total")?;
            let params = d.parameters();
            let grads = grad(&total, &params.iter().collect::<Vec<_>>(), false);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { scale: n, step, term: "discriminator gradient" });
            }
            d_opt.step(&mut model.discriminator, &grads);
            updates += 1;
        }

        let (mut l0_g, mut l1_v, mut l2_v) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.g_steps {
            let z = sample_noise(&mut rng, n == coarsest, h, w);
            let input = z.mul_scalar(model.noise_amp).add(&rand_up);
            let fake = model.residual(&input, style_img.as_ref())?.add(&rand_up);
            let (l0, _) = adversarial_losses(&Tensor::zeros(&[1]), &model.discriminator.forward(&apply_mask(&fake, mask))?);
            let rec = model.residual(&anchor_input, identity_style.as_ref())?.add(&rec_up);
            let (l1, l2) = reconstruction_losses(&rec, &target, mask)?;
            let total = generator_total(&l0, &l1, &l2, &weights);
            l0_g = finite(l0.item(), n, step, "l0_g")?;
            l1_v = finite(l1.item(), n, step, "l1")?;
            l2_v = finite(l2.item(), n, step, "l2")?;
            finite(total.item(), n, step, "generator total")?;
            let g_params = model.generator.parameters();
            let si_params = model.injectors.parameters();
            let refs: Vec<&Tensor> = g_params.iter().chain(&si_params).collect();
            let mut grads = grad(&total, &refs, false);
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { scale: n, step, term: "generator gradient" });
            }
            let si_grads = grads.split_off(g_params.len());
            g_opt.step(&mut model.generator, &grads);
            if !si_grads.is_empty() {
                si_opt.step(&mut model.injectors, &si_grads);
            }
            updates += 1;
        }

        sink.record(&ProgressRecord { branch: label.to_string(), scale: n, step, l0_g, l0_d, l1: l1_v, l2: l2_v, gp: gp_v });
    }

    model.freeze();
    stack.scales.push(model);
    Ok(updates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::build_pyramid;

    fn tiny() -> TrainConfig {
        TrainConfig {
            iters_per_scale: 1,
            blocks: BlockConfig { base_channels: 4, num_resblocks: 1, ..BlockConfig::default() },
            pyramid: PyramidSpec { num_scales: Some(0), min_coarse_dim: 11, ..PyramidSpec::default() },
            ..TrainConfig::default()
        }
    }

    fn toy(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((x as f64 * 0.5 + c as f64).sin() * (y as f64 * 0.35).cos()))
    }

    fn roi_stack(cfg: &TrainConfig, size: usize) -> BranchStack {
        let pyr = build_pyramid(&toy(size, size), &cfg.pyramid).unwrap();
        BranchStack::new(BranchKind::Roi, pyr, None, cfg.branch_blocks(BranchKind::Roi), 3).unwrap()
    }

    #[test]
    fn one_iteration_counts_updates() {
        let cfg = tiny();
        let mut stack = roi_stack(&cfg, 12);
        let sink = MemorySink::default();
        let report = train_branch(&mut stack, "roi_0", &cfg, &sink).unwrap();
        assert_eq!(report.optimizer_updates, cfg.d_steps + cfg.g_steps);
        assert_eq!(report.scales_trained, vec![0]);
        assert_eq!(sink.records().len(), 1);
        assert!(stack.is_complete());
        let digests = stack.digests();
        assert!(train_branch(&mut stack, "roi_0", &cfg, &sink).unwrap().scales_trained.is_empty());
        assert_eq!(stack.digests(), digests);
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let cfg = TrainConfig {
            iters_per_scale: 2,
            pyramid: PyramidSpec { num_scales: Some(1), min_coarse_dim: 11, ..PyramidSpec::default() },
            ..tiny()
        };
        let mut a = roi_stack(&cfg, 16);
        let mut b = roi_stack(&cfg, 16);
        train_branch(&mut a, "roi_0", &cfg, &NullSink).unwrap();
        train_next_scale(&mut b, "roi_0", &cfg, &NullSink).unwrap();
        assert_eq!(b.finest_trained(), Some(1));
        train_branch(&mut b, "roi_0", &cfg, &NullSink).unwrap();
        assert_eq!(a.digests(), b.digests());
        assert_eq!(a.model(0).unwrap().noise_amp, b.model(0).unwrap().noise_amp);
        assert!(a.model(0).unwrap().noise_amp > 0.0);
    }

    #[test]
    fn reconstruction_pass_reports_losses() {
        let cfg = tiny();
        let mut stack = roi_stack(&cfg, 12);
        train_branch(&mut stack, "roi_0", &cfg, &NullSink).unwrap();
        let (img, l1, l2) = reconstruction_pass(&stack, 0).unwrap();
        assert_eq!(img.dims(), (12, 12));
        assert!(l2 > 0.0 && l1 > 0.0);
        assert_eq!(reconstruction_pass(&stack, 0).unwrap().2, l2);
    }

    #[test]
    fn nan_learning_rate_aborts_with_location() {
        let mut cfg = tiny();
        cfg.adam.lr = 1e200;
        cfg.iters_per_scale = 3;
        let mut stack = roi_stack(&cfg, 12);
        match train_branch(&mut stack, "roi_0", &cfg, &NullSink) {
            Err(Error::NonFiniteLoss { scale: 0, .. }) => {}
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn presets_toggle_flags() {
        let base = AblationPreset::Baseline.flags();
        assert!(base.disable_deformable && base.disable_channel_attention && base.disable_style_injector && base.disable_gated_conv);
        assert_eq!(AblationPreset::Full.flags(), AblationFlags::default());
        let cfg = TrainConfig::desk().with_preset(AblationPreset::NoStyleInjector);
        let roi = cfg.branch_blocks(BranchKind::Roi);
        assert!(!roi.injector_enabled && roi.deform_enabled && roi.attention_enabled && !roi.gated_enabled);
        let bg = cfg.branch_blocks(BranchKind::Background);
        assert!(bg.gated_enabled && !bg.deform_enabled && !bg.injector_enabled);
        assert_eq!(TrainConfig::desk().iters_per_scale, 200);
        assert_eq!(TrainConfig::profile(Profile::Paper).iters_per_scale, 2000);
        let adam = TrainConfig::default().adam;
        assert_eq!((adam.lr, adam.beta1, adam.beta2), (3e-4, 0.0, 0.99));
    }

    #[test]
    fn jsonl_sink_writes_lines() {
        let sink = JsonlSink::new(Vec::new());
        let r = ProgressRecord { branch: "background".into(), scale: 2, step: 5, l0_g: 0.5, l0_d: -0.1, l1: 0.2, l2: 0.01, gp: 0.3 };
        sink.record(&r);
        sink.record(&r);
        let text = String::from_utf8(sink.0.into_inner().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: ProgressRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, r);
    }
}
