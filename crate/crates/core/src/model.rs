//! A trained image: one ROI stack per box plus the background stack.

use serde::{Deserialize, Serialize};

use crate::augment::{level_schedule, sample_descriptor, AugmentDescriptor, AugmentKind};
use crate::error::{Error, Result};
use crate::generators::{inject_edit, BranchKind, BranchStack, NoiseSpec, StyleSource};
use crate::imaging::{build_pyramid, crop_roi, fuse, validate_boxes, Image, Mask, RoiBox};
use crate::seed::derive_seed;
use crate::trainer::{train_branch, ProgressSink, TrainConfig, TrainReport};

#[derive(Clone, Debug)]
pub struct MoganModel {
    /// The training image, quantized to `f32` so that it survives a
    /// checkpoint round-trip exactly.
    pub source: Image,
    pub boxes: Vec<RoiBox>,
    pub config: TrainConfig,
    pub roi: Vec<BranchStack>,
    pub background: BranchStack,
}

/// One fused output together with its parts.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub background: Image,
    /// ROI outputs at crop resolution, one per box.
    pub rois: Vec<Image>,
    pub descriptors: Vec<AugmentDescriptor>,
}

/// Branch name used in logs and checkpoints.
pub fn roi_label(i: usize) -> String {
    format!("roi_{i}")
}

pub const BACKGROUND_LABEL: &str = "background";

impl MoganModel {
    pub fn new(source: &Image, boxes: &[RoiBox], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = source.dims();
        validate_boxes(boxes, h, w)?;
        let source = source.quantized_f32();

        let roi = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let pyramid = build_pyramid(&crop_roi(&source, b)?, &config.pyramid)?;
                let seed = derive_seed(config.seed, "roi", &[i as u64]);
                BranchStack::new(BranchKind::Roi, pyramid, None, config.branch_blocks(BranchKind::Roi), seed)
            })
            .collect::<Result<Vec<_>>>()?;

        let full = build_pyramid(&source, &config.pyramid)?;
        let masks: Vec<Mask> = full
            .iter()
            .enumerate()
            .map(|(n, level)| {
                let factor = config.pyramid.rescale_factor.powi(n as i32);
                let scaled: Vec<RoiBox> = boxes.iter().map(|b| b.rescaled(factor, level.height(), level.width())).collect();
                Mask::from_boxes(level.height(), level.width(), &scaled)
            })
            .collect();
        let masked = full.iter().zip(&masks).map(|(img, m)| m.apply(img)).collect::<Result<Vec<_>>>()?;
        let background = BranchStack::new(
            BranchKind::Background,
            masked,
            Some(masks),
            config.branch_blocks(BranchKind::Background),
            derive_seed(config.seed, "background", &[]),
        )?;
        Ok(MoganModel { source, boxes: boxes.to_vec(), config, roi, background })
    }

    pub fn stacks(&self) -> impl Iterator<Item = (String, &BranchStack)> {
        self.roi.iter().enumerate().map(|(i, s)| (roi_label(i), s)).chain(std::iter::once((BACKGROUND_LABEL.to_string(), &self.background)))
    }

    pub fn is_trained(&self) -> bool {
        self.stacks().all(|(_, s)| s.is_complete())
    }

    /// Trains every branch to completion, one thread per branch. Branches
    /// use disjoint random streams, so the result does not depend on
    /// scheduling. Already-trained scales are kept.
    pub fn train(&mut self, sink: &dyn ProgressSink) -> Result<Vec<(String, TrainReport)>> {
        let config = &self.config;
        let mut jobs: Vec<(String, &mut BranchStack)> =
            self.roi.iter_mut().enumerate().map(|(i, s)| (roi_label(i), s)).collect();
        jobs.push((BACKGROUND_LABEL.to_string(), &mut self.background));
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|(label, stack)| {
                    scope.spawn(move || train_branch(stack, &label, config, sink).map(|r| (label, r)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    }

    /// Combined digest of every trained scale in every branch.
    pub fn digests(&self) -> Vec<(String, Vec<String>)> {
        self.stacks().map(|(l, s)| (l, s.digests())).collect()
    }

    fn require_trained(&self) -> Result<()> {
        for (_, s) in self.stacks() {
            if let Some(n) = s.next_untrained() {
                return Err(Error::UntrainedScale(n));
            }
        }
        Ok(())
    }

    fn roi_uses_style(&self) -> bool {
        self.roi.first().and_then(|s| s.model(s.coarsest())).is_some_and(|m| !m.injectors.is_empty())
    }

    /// Random noise in every branch and a random augmentation per box.
    pub fn sample(&self, seed: u64) -> Result<Sample> {
        let descriptors = (0..self.boxes.len())
            .map(|i| {
                if self.roi_uses_style() {
                    sample_descriptor(derive_seed(seed, "augment", &[i as u64]), &AugmentKind::TRAINING)
                } else {
                    Ok(AugmentDescriptor::identity())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        self.sample_with(seed, &descriptors)
    }

    /// Random noise from `seed` with explicit augmentations, one per box.
    pub fn sample_with(&self, seed: u64, descriptors: &[AugmentDescriptor]) -> Result<Sample> {
        self.require_trained()?;
        if descriptors.len() != self.boxes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} augmentation descriptors for {} boxes",
                descriptors.len(),
                self.boxes.len()
            )));
        }
        let rois = self
            .roi
            .iter()
            .zip(descriptors)
            .enumerate()
            .map(|(i, (stack, d))| {
                d.validate()?;
                stack.generate(&roi_noise(seed, i), &StyleSource::Augment(d), 0)
            })
            .collect::<Result<Vec<_>>>()?;
        self.compose(seed, rois, descriptors.to_vec())
    }

    fn compose(&self, seed: u64, rois: Vec<Image>, descriptors: Vec<AugmentDescriptor>) -> Result<Sample> {
        let background = self.background.generate(&background_noise(seed), &StyleSource::Identity, 0)?;
        let parts: Vec<(Image, RoiBox)> = rois.iter().cloned().zip(self.boxes.iter().copied()).collect();
        let image = fuse(&parts, &background, self.config.band_px)?;
        Ok(Sample { image, background, rois, descriptors })
    }

    /// Harmonizes an edited copy of the source: the edited crops drive the
    /// ROI injectors, the background is freshly generated from `seed`.
    pub fn edit(&self, edited: &Image, seed: u64) -> Result<Sample> {
        self.require_trained()?;
        if edited.dims() != self.source.dims() {
            return Err(Error::DimensionMismatch(format!(
                "edited image is {:?}, source is {:?}",
                edited.dims(),
                self.source.dims()
            )));
        }
        let rois = self
            .roi
            .iter()
            .zip(&self.boxes)
            .enumerate()
            .map(|(i, (stack, b))| inject_edit(stack, &crop_roi(edited, b)?, &roi_noise(seed, i), self.config.edit_min_scale))
            .collect::<Result<Vec<_>>>()?;
        self.compose(seed, rois, vec![AugmentDescriptor::identity(); self.boxes.len()])
    }

    /// Frames with one augmentation kind swept from level 0 to `level_max`
    /// under fixed noise.
    pub fn animate(&self, kind: AugmentKind, frames: usize, level_max: f64, seed: u64) -> Result<Vec<Sample>> {
        let schedule = level_schedule(kind, frames, level_max, derive_seed(seed, "animate", &[]))?;
        schedule.iter().map(|d| self.sample_with(seed, &vec![*d; self.boxes.len()])).collect()
    }
}

fn roi_noise(seed: u64, i: usize) -> NoiseSpec {
    NoiseSpec::Seeded(derive_seed(seed, "roi", &[i as u64]))
}

fn background_noise(seed: u64) -> NoiseSpec {
    NoiseSpec::Seeded(derive_seed(seed, "background", &[]))
}

/// Provenance of one written sample; together with the checkpoint it is
/// enough to regenerate the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub project_id: String,
    pub kind: SampleKind,
    pub seed: u64,
    pub descriptors: Vec<AugmentDescriptor>,
    pub band_px: usize,
    pub output: String,
    /// Path of the edited input, for edit samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Random,
    Edit,
    AnimationFrame,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockConfig;
    use crate::imaging::PyramidSpec;
    use crate::trainer::{MemorySink, NullSink};

    fn tiny() -> TrainConfig {
        TrainConfig {
            iters_per_scale: 1,
            blocks: BlockConfig { base_channels: 4, num_resblocks: 1, ..BlockConfig::default() },
            pyramid: PyramidSpec { num_scales: Some(1), min_coarse_dim: 11, ..PyramidSpec::default() },
            ..TrainConfig::default()
        }
    }

    fn toy() -> Image {
        Image::from_fn(24, 26, |y, x, c| 0.5 + 0.4 * ((x as f64 * 0.5 + c as f64).sin() * (y as f64 * 0.35).cos()))
    }

    fn trained() -> MoganModel {
        let mut m = MoganModel::new(&toy(), &[RoiBox::new(4, 5, 18, 20)], tiny()).unwrap();
        m.train(&NullSink).unwrap();
        m
    }

    #[test]
    fn construction_builds_all_pyramids() {
        let m = MoganModel::new(&toy(), &[RoiBox::new(4, 5, 18, 20)], tiny()).unwrap();
        assert_eq!(m.roi[0].dims(0), (15, 14));
        assert_eq!(m.background.dims(0), (24, 26));
        let mask = &m.background.masks.as_ref().unwrap()[0];
        assert_eq!(mask.hidden_count(), 15 * 14);
        assert!(!m.is_trained());
        assert!(matches!(m.sample(0), Err(Error::UntrainedScale(_))));
        assert!(MoganModel::new(&toy(), &[RoiBox::new(4, 5, 40, 20)], tiny()).is_err());
    }

    #[test]
    fn training_both_branches_is_deterministic() {
        let a = trained();
        let sink = MemorySink::default();
        let mut b = MoganModel::new(&toy(), &[RoiBox::new(4, 5, 18, 20)], tiny()).unwrap();
        let reports = b.train(&sink).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(a.digests(), b.digests());
        let labels: std::collections::BTreeSet<String> = sink.records().into_iter().map(|r| r.branch).collect();
        assert_eq!(labels.into_iter().collect::<Vec<_>>(), vec!["background".to_string(), "roi_0".to_string()]);
        assert!(b.is_trained());
    }

    #[test]
    fn sampling_editing_and_animation() {
        let m = trained();
        let s1 = m.sample(7).unwrap();
        assert_eq!(s1.image.dims(), m.source.dims());
        assert_eq!(s1.image, m.sample(7).unwrap().image);
        assert_ne!(s1.image, m.sample(8).unwrap().image);

        let before = m.digests();
        let e = m.edit(&m.source, 3).unwrap();
        assert_eq!(e.image.dims(), m.source.dims());
        assert_eq!(m.digests(), before);
        assert!(m.edit(&Image::filled(5, 5, [0.0; 3]), 3).is_err());

        let frames = m.animate(AugmentKind::Rotation, 3, 0.8, 11).unwrap();
        assert_eq!(frames.len(), 3);
        let identity = m.sample_with(11, &[AugmentDescriptor::identity()]).unwrap();
        assert_eq!(frames[0].image, identity.image);
    }
}
