//! On-disk project store:
//!
//! ```text
//! $MOGAN_HOME/projects/{id}/
//!     project.json      status and training configuration
//!     source.png
//!     roi.json          box list
//!     progress.jsonl    training log
//!     checkpoint/
//!     samples/          {sample_id}.png + {sample_id}.json
//!     metrics.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mogan::imaging::{validate_boxes, Image, RoiBox};
use mogan::model::SampleRecord;
use mogan::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const HOME_VAR: &str = "MOGAN_HOME";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectStatus {
    Created,
    Training,
    Trained,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: String,
    pub status: ProjectStatus,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<RoiBox>,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

/// Project and sample ids are lowercase alphanumerics joined by `-`; the
/// project id is the part before the first `-`.
fn check_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()[..12].to_string()
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("projects"))?;
        Ok(Store { root })
    }

    /// `$MOGAN_HOME`, or `./mogan-home`.
    pub fn from_env() -> Result<Self> {
        Self::open(std::env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mogan-home")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: &str) -> PathBuf {
        self.root.join("projects").join(id)
    }

    pub fn checkpoint_dir(&self, id: &str) -> PathBuf {
        self.project_dir(id).join("checkpoint")
    }

    pub fn samples_dir(&self, id: &str) -> PathBuf {
        self.project_dir(id).join("samples")
    }

    pub fn progress_path(&self, id: &str) -> PathBuf {
        self.project_dir(id).join("progress.jsonl")
    }

    pub fn metrics_path(&self, id: &str) -> PathBuf {
        self.project_dir(id).join("metrics.json")
    }

    pub fn create_project(&self, source: &Image, boxes: &[RoiBox], config: TrainConfig) -> Result<Project> {
        config.validate()?;
        let (height, width) = source.dims();
        validate_boxes(boxes, height, width)?;
        let project = Project { id: new_id(), status: ProjectStatus::Created, width, height, boxes: boxes.to_vec(), config, error: None };
        let dir = self.project_dir(&project.id);
        fs::create_dir_all(dir.join("samples"))?;
        source.save_png(dir.join("source.png"))?;
        self.save(&project)?;
        Ok(project)
    }

    pub fn project(&self, id: &str) -> Result<Project> {
        let dir = self.project_dir(id);
        if !check_id(id) || id.contains('-') || !dir.join("project.json").is_file() {
            return Err(AppError::ProjectNotFound(id.to_string()));
        }
        let mut project: Project = serde_json::from_slice(&fs::read(dir.join("project.json"))?)?;
        project.boxes = serde_json::from_slice(&fs::read(dir.join("roi.json"))?)?;
        Ok(project)
    }

    pub fn save(&self, project: &Project) -> Result<()> {
        let dir = self.project_dir(&project.id);
        write_atomic(&dir.join("roi.json"), &serde_json::to_vec_pretty(&project.boxes)?)?;
        write_atomic(&dir.join("project.json"), &serde_json::to_vec_pretty(project)?)
    }

    pub fn source(&self, id: &str) -> Result<Image> {
        Ok(Image::load(self.project_dir(id).join("source.png"))?)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("projects"))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|id| self.project_dir(id).join("project.json").is_file())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn sample_png(&self, sample_id: &str) -> Result<PathBuf> {
        let path = self.sample_path(sample_id, "png")?;
        if path.is_file() { Ok(path) } else { Err(AppError::SampleNotFound(sample_id.to_string())) }
    }

    pub fn sample_record(&self, sample_id: &str) -> Result<SampleRecord> {
        let path = self.sample_path(sample_id, "json")?;
        if !path.is_file() {
            return Err(AppError::SampleNotFound(sample_id.to_string()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Writes the image and its record; `record.output` is set to the PNG
    /// path relative to the project directory.
    pub fn write_sample(&self, record: &mut SampleRecord, image: &Image) -> Result<PathBuf> {
        let dir = self.samples_dir(&record.project_id);
        fs::create_dir_all(&dir)?;
        let png = dir.join(format!("{}.png", record.id));
        image.save_png(&png)?;
        record.output = format!("samples/{}.png", record.id);
        write_atomic(&dir.join(format!("{}.json", record.id)), &serde_json::to_vec_pretty(record)?)?;
        Ok(png)
    }

    fn sample_path(&self, sample_id: &str, ext: &str) -> Result<PathBuf> {
        let project = sample_id.split('-').next().unwrap_or_default();
        if !check_id(sample_id) || !sample_id.contains('-') || !self.project_dir(project).is_dir() {
            return Err(AppError::SampleNotFound(sample_id.to_string()));
        }
        Ok(self.samples_dir(project).join(format!("{sample_id}.{ext}")))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}
