//! Project operations shared by the CLI and the HTTP service.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use mogan::augment::AugmentKind;
use mogan::checkpoint::{self, CheckpointWriter};
use mogan::generators::BranchStack;
use mogan::imaging::{Image, RoiBox};
use mogan::metrics::{self, ConvStackExtractor, EvalTarget, MetricsReport};
use mogan::model::{MoganModel, Sample, SampleKind, SampleRecord};
use mogan::trainer::{Profile, ProgressRecord, ProgressSink, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::store::{new_id, write_atomic, Project, ProjectStatus, Store};

/// Seed of the frozen random feature extractor used for every report.
pub const EXTRACTOR_SEED: u64 = 0;
pub const DEFAULT_EVAL_SAMPLES: usize = 20;
pub const MAX_BATCH: usize = 256;

/// Training configuration overrides accepted by `train` (CLI flags or the
/// HTTP request body).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default)]
    pub profile: Option<Profile>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub iters_per_scale: Option<usize>,
    #[serde(default)]
    pub band_px: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = match self.profile {
            Some(p) => TrainConfig { seed: base.seed, band_px: base.band_px, ..TrainConfig::profile(p) },
            None => base.clone(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(iters) = self.iters_per_scale {
            cfg.iters_per_scale = iters;
        }
        if let Some(band) = self.band_px {
            cfg.band_px = band;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub l0_g: f64,
    pub l0_d: f64,
    pub l1: f64,
    pub l2: f64,
    pub gp: f64,
}

impl From<&ProgressRecord> for Losses {
    fn from(r: &ProgressRecord) -> Self {
        Losses { l0_g: r.l0_g, l0_d: r.l0_d, l1: r.l1, l2: r.l2, gp: r.gp }
    }
}

/// Training position of one branch. `level` counts scales from the
/// coarsest (0) towards the finest (`levels - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchProgress {
    pub branch: String,
    pub levels: usize,
    pub level: usize,
    pub pyramid_index: usize,
    pub step: usize,
    pub done: bool,
    pub losses: Option<Losses>,
}

/// Reply to a status poll. `(scale, step)` is the position of the
/// least-advanced branch still training, with `scale` counted from the
/// coarsest level, so successive polls never go backwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub id: String,
    pub status: ProjectStatus,
    pub scale: usize,
    pub step: usize,
    pub losses: Option<Losses>,
    pub branch: Option<String>,
    pub error: Option<String>,
    pub branches: Vec<BranchProgress>,
}

/// Progress sink that keeps the latest position per branch and appends
/// every record to the project's JSON-lines log.
pub struct ProgressTracker {
    branches: Mutex<Vec<BranchProgress>>,
    log: Option<Mutex<BufWriter<File>>>,
}

impl ProgressTracker {
    pub fn new(model: &MoganModel, log: Option<File>) -> Self {
        let branches = model.stacks().map(|(label, stack)| initial_progress(label, stack)).collect();
        ProgressTracker { branches: Mutex::new(branches), log: log.map(|f| Mutex::new(BufWriter::new(f))) }
    }

    pub fn branches(&self) -> Vec<BranchProgress> {
        self.branches.lock().expect("progress poisoned").clone()
    }

    pub fn report(&self, project: &Project) -> StatusReport {
        let mut report = idle_report(project);
        let branches = self.branches();
        let current = branches.iter().filter(|b| !b.done).min_by_key(|b| (b.level, b.step));
        match current {
            Some(b) => {
                report.scale = b.level;
                report.step = b.step;
                report.losses = b.losses;
                report.branch = Some(b.branch.clone());
            }
            None => {
                report.scale = branches.iter().map(|b| b.levels).max().unwrap_or(0);
                report.step = 0;
            }
        }
        report.branches = branches;
        report
    }

    pub fn flush(&self) {
        if let Some(log) = &self.log {
            let _ = log.lock().expect("log poisoned").flush();
        }
    }
}

fn initial_progress(label: String, stack: &BranchStack) -> BranchProgress {
    let levels = stack.coarsest() + 1;
    let trained = stack.scales.len();
    BranchProgress {
        branch: label,
        levels,
        level: trained,
        pyramid_index: stack.coarsest().saturating_sub(trained),
        step: 0,
        done: stack.is_complete(),
        losses: None,
    }
}

impl ProgressSink for ProgressTracker {
    fn record(&self, record: &ProgressRecord) {
        {
            let mut branches = self.branches.lock().expect("progress poisoned");
            if let Some(b) = branches.iter_mut().find(|b| b.branch == record.branch) {
                b.level = b.levels - 1 - record.scale;
                b.pyramid_index = record.scale;
                b.step = record.step;
                b.losses = Some(record.into());
            }
        }
        if let Some(log) = &self.log {
            let mut w = log.lock().expect("log poisoned");
            if serde_json::to_writer(&mut *w, record).is_ok() {
                let _ = w.write_all(b"\n");
            }
        }
    }

    fn scale_frozen(&self, branch: &str, scale: usize, _stack: &BranchStack) -> mogan::Result<()> {
        let mut branches = self.branches.lock().expect("progress poisoned");
        if let Some(b) = branches.iter_mut().find(|b| b.branch == branch) {
            b.level = b.levels - scale;
            b.pyramid_index = scale.saturating_sub(1);
            b.step = 0;
            b.done = scale == 0;
        }
        Ok(())
    }
}

/// Status without a live tracker: the final or initial position implied
/// by the stored project state.
pub fn idle_report(project: &Project) -> StatusReport {
    StatusReport {
        id: project.id.clone(),
        status: project.status,
        scale: 0,
        step: 0,
        losses: None,
        branch: None,
        error: project.error.clone(),
        branches: Vec::new(),
    }
}

/// Status from stored state alone: trained projects report the final
/// position recorded in their checkpoint.
pub fn stored_report(store: &Store, project: &Project) -> StatusReport {
    let mut report = idle_report(project);
    if project.status == ProjectStatus::Trained {
        if let Ok(manifest) = checkpoint::Manifest::read(&store.checkpoint_dir(&project.id)) {
            report.branches = manifest
                .branches
                .iter()
                .map(|b| BranchProgress {
                    branch: b.name.clone(),
                    levels: b.pyramid_dims.len(),
                    level: b.pyramid_dims.len(),
                    pyramid_index: 0,
                    step: 0,
                    done: true,
                    losses: None,
                })
                .collect();
            report.scale = report.branches.iter().map(|b| b.levels).max().unwrap_or(0);
        }
    }
    report
}

/// A claimed training run: the project is marked `training` on creation.
pub struct TrainingJob {
    project: Project,
    model: MoganModel,
    tracker: Arc<ProgressTracker>,
}

impl TrainingJob {
    /// Claims a `created` project for training, applying `overrides`.
    pub fn start(store: &Store, id: &str, overrides: &TrainOverrides) -> Result<Self> {
        let mut project = store.project(id)?;
        match project.status {
            ProjectStatus::Created => {}
            ProjectStatus::Training => return Err(AppError::Conflict(format!("project `{id}` is already training"))),
            ProjectStatus::Trained => return Err(AppError::Conflict(format!("project `{id}` is already trained"))),
            ProjectStatus::Failed => return Err(AppError::Conflict(format!("project `{id}` failed; create a new project"))),
        }
        if project.boxes.is_empty() {
            return Err(AppError::Invalid("set at least one ROI box before training".into()));
        }
        project.config = overrides.apply(&project.config)?;
        let model = MoganModel::new(&store.source(id)?, &project.boxes, project.config.clone())?;
        let log = File::create(store.progress_path(id))?;
        let tracker = Arc::new(ProgressTracker::new(&model, Some(log)));
        project.status = ProjectStatus::Training;
        project.error = None;
        store.save(&project)?;
        Ok(TrainingJob { project, model, tracker })
    }

    pub fn tracker(&self) -> Arc<ProgressTracker> {
        Arc::clone(&self.tracker)
    }

    pub fn project(&self) -> &Project {
        &self.project
    }

    /// Trains to completion, checkpointing every frozen scale, and records
    /// the final status.
    pub fn run(self, store: &Store) -> Result<Project> {
        let TrainingJob { mut project, mut model, tracker } = self;
        let outcome = CheckpointWriter::create(&model, store.checkpoint_dir(&project.id), &*tracker)
            .and_then(|writer| model.train(&writer).map(|_| ()));
        tracker.flush();
        match outcome {
            Ok(()) => {
                project.status = ProjectStatus::Trained;
                store.save(&project)?;
                Ok(project)
            }
            Err(e) => {
                project.status = ProjectStatus::Failed;
                project.error = Some(e.to_string());
                store.save(&project)?;
                Err(e.into())
            }
        }
    }
}

/// Replaces a project's boxes. Only allowed before training.
pub fn set_roi(store: &Store, id: &str, boxes: Vec<RoiBox>) -> Result<Project> {
    let mut project = store.project(id)?;
    if project.status != ProjectStatus::Created {
        return Err(AppError::Conflict(format!("project `{id}` is {:?}; boxes are fixed once training starts", project.status)));
    }
    mogan::imaging::validate_boxes(&boxes, project.height, project.width)?;
    // Reject boxes whose crops cannot form a pyramid now rather than at training time.
    MoganModel::new(&store.source(id)?, &boxes, project.config.clone())?;
    project.boxes = boxes;
    store.save(&project)?;
    Ok(project)
}

pub fn load_model(store: &Store, project: &Project) -> Result<MoganModel> {
    if project.status != ProjectStatus::Trained {
        return Err(AppError::Conflict(format!("project `{}` is not trained", project.id)));
    }
    Ok(checkpoint::load(store.checkpoint_dir(&project.id))?)
}

fn with_band(model: &MoganModel, band_px: Option<usize>) -> std::borrow::Cow<'_, MoganModel> {
    match band_px {
        Some(b) if b != model.config.band_px => {
            let mut m = model.clone();
            m.config.band_px = b;
            std::borrow::Cow::Owned(m)
        }
        _ => std::borrow::Cow::Borrowed(model),
    }
}

fn record(project: &Project, kind: SampleKind, id: String, seed: u64, sample: &Sample, band_px: usize) -> SampleRecord {
    SampleRecord {
        id,
        project_id: project.id.clone(),
        kind,
        seed,
        descriptors: sample.descriptors.clone(),
        band_px,
        output: String::new(),
        edited_input: None,
        metrics: None,
    }
}

/// A written sample: its record and the absolute PNG path.
#[derive(Clone, Debug)]
pub struct Written {
    pub record: SampleRecord,
    pub path: PathBuf,
}

/// `count` random samples; sample `i` uses seed `seed + i`.
pub fn generate(store: &Store, project: &Project, model: &MoganModel, count: usize, seed: u64, band_px: Option<usize>) -> Result<Vec<Written>> {
    if count == 0 || count > MAX_BATCH {
        return Err(AppError::Invalid(format!("count must be in 1..={MAX_BATCH}, got {count}")));
    }
    let model = with_band(model, band_px);
    let band = model.config.band_px;
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_add(i);
            let sample = model.sample(s)?;
            let mut rec = record(project, SampleKind::Random, format!("{}-{}", project.id, new_id()), s, &sample, band);
            let path = store.write_sample(&mut rec, &sample.image)?;
            Ok(Written { record: rec, path })
        })
        .collect()
}

/// Harmonizes an edited copy of the source image.
pub fn edit(store: &Store, project: &Project, model: &MoganModel, edited: &Image, seed: u64) -> Result<Written> {
    let sample = model.edit(edited, seed)?;
    let id = format!("{}-{}", project.id, new_id());
    let input = format!("samples/{id}.input.png");
    edited.save_png(store.project_dir(&project.id).join(&input))?;
    let mut rec = record(project, SampleKind::Edit, id, seed, &sample, model.config.band_px);
    rec.edited_input = Some(input);
    let path = store.write_sample(&mut rec, &sample.image)?;
    Ok(Written { record: rec, path })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Animation {
    pub id: String,
    pub project_id: String,
    pub kind: AugmentKind,
    pub level_max: f64,
    pub seed: u64,
    pub fps: f64,
    /// Sample ids of the frames, in order.
    pub frames: Vec<String>,
    /// Frame PNGs relative to the project directory.
    pub files: Vec<String>,
}

/// Parameters of an animation request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateSpec {
    pub kind: AugmentKind,
    pub frames: usize,
    #[serde(default = "full_level")]
    pub level_max: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn full_level() -> f64 {
    1.0
}

fn default_fps() -> f64 {
    12.0
}

/// Frames sweeping one augmentation from level 0 to `level_max` under
/// fixed noise.
pub fn animate(store: &Store, project: &Project, model: &MoganModel, spec: &AnimateSpec) -> Result<Animation> {
    let AnimateSpec { kind, frames, level_max, fps, seed } = *spec;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(AppError::Invalid(format!("fps must be positive, got {fps}")));
    }
    if frames > MAX_BATCH {
        return Err(AppError::Invalid(format!("at most {MAX_BATCH} frames")));
    }
    let samples = model.animate(kind, frames, level_max, seed)?;
    let id = format!("{}-{}", project.id, new_id());
    let mut anim = Animation { id: id.clone(), project_id: project.id.clone(), kind, level_max, seed, fps, frames: Vec::new(), files: Vec::new() };
    for (i, sample) in samples.iter().enumerate() {
        let mut rec = record(project, SampleKind::AnimationFrame, format!("{id}-f{i:03}"), seed, sample, model.config.band_px);
        store.write_sample(&mut rec, &sample.image)?;
        anim.frames.push(rec.id);
        anim.files.push(rec.output);
    }
    write_atomic(&store.samples_dir(&project.id).join(format!("{id}.animation.json")), &serde_json::to_vec_pretty(&anim)?)?;
    Ok(anim)
}

/// Recomputes a sample from the checkpoint and its record.
pub fn regenerate(store: &Store, model: &MoganModel, rec: &SampleRecord) -> Result<Image> {
    let model = with_band(model, Some(rec.band_px));
    let sample = match rec.kind {
        SampleKind::Random | SampleKind::AnimationFrame => model.sample_with(rec.seed, &rec.descriptors)?,
        SampleKind::Edit => {
            let input = rec.edited_input.as_ref().ok_or_else(|| AppError::Invalid(format!("edit sample `{}` has no input", rec.id)))?;
            model.edit(&Image::load(store.project_dir(&rec.project_id).join(input))?, rec.seed)?
        }
    };
    Ok(sample.image)
}

/// SIFID, diversity and quality index for every target; cached in
/// `metrics.json`.
pub fn evaluate(store: &Store, project: &Project, model: &MoganModel, samples: usize, seed: u64) -> Result<Vec<MetricsReport>> {
    let fx = ConvStackExtractor::random(EXTRACTOR_SEED);
    let reports = metrics::evaluate(model, samples, &EvalTarget::ALL, seed, &fx)?;
    write_atomic(&store.metrics_path(&project.id), &serde_json::to_vec_pretty(&reports)?)?;
    Ok(reports)
}

pub fn cached_metrics(store: &Store, id: &str) -> Result<Option<Vec<MetricsReport>>> {
    let path = store.metrics_path(id);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}
