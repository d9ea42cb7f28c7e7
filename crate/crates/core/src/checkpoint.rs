//! On-disk checkpoints.
//!
//! ```text
//! manifest.json
//! source.bin
//! roi_0/scale_{n}_G.bin  scale_{n}_D.bin  scale_{n}_SI.bin
//! background/scale_{n}_G.bin  scale_{n}_D.bin
//! ```
//!
//! Blobs use the tensor encoding of [`crate::params::encode_tensors`]. The
//! manifest records a SHA-256 digest for every blob; loading refuses any
//! blob whose digest differs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mogan_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{BranchKind, BranchStack, ScaleModel};
use crate::imaging::{Image, RoiBox};
use crate::model::{roi_label, MoganModel, BACKGROUND_LABEL};
use crate::params::{decode_tensors, digest_bytes, encode_tensors, load_into, Init, Module};
use crate::trainer::{NullSink, ProgressRecord, ProgressSink, TrainConfig};

pub const FORMAT: &str = "mogan-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    /// Path relative to the checkpoint directory.
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    pub noise_amp: f64,
    pub generator: BlobRef,
    pub discriminator: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injectors: Option<BlobRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchEntry {
    pub name: String,
    pub kind: BranchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<RoiBox>,
    pub seed: u64,
    pub pyramid_dims: Vec<(usize, usize)>,
    /// Trained scales, coarsest first.
    pub scales: Vec<ScaleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub source: BlobRef,
    pub source_dims: (usize, usize),
    pub boxes: Vec<RoiBox>,
    pub config: TrainConfig,
    pub branches: Vec<BranchEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn is_trained(&self) -> bool {
        self.branches.iter().all(|b| b.scales.last().is_some_and(|s| s.index == 0))
    }

    /// Every blob referenced by the manifest.
    pub fn blobs(&self) -> impl Iterator<Item = &BlobRef> {
        std::iter::once(&self.source).chain(
            self.branches
                .iter()
                .flat_map(|b| &b.scales)
                .flat_map(|s| [Some(&s.generator), Some(&s.discriminator), s.injectors.as_ref()].into_iter().flatten()),
        )
    }
}

fn write_blob(dir: &Path, file: String, bytes: &[u8]) -> Result<BlobRef> {
    let path = dir.join(&file);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    Ok(BlobRef { file, sha256: digest_bytes(bytes) })
}

fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<u8>> {
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path)?;
    if digest_bytes(&bytes) != blob.sha256 {
        return Err(Error::DigestMismatch(path));
    }
    Ok(bytes)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
    fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}

fn scale_entry(dir: &Path, label: &str, m: &ScaleModel) -> Result<ScaleEntry> {
    let file = |part: &str| format!("{label}/scale_{}_{part}.bin", m.index);
    let injectors = if m.injectors.is_empty() {
        None
    } else {
        Some(write_blob(dir, file("SI"), &encode_tensors(&m.injectors.parameters()))?)
    };
    Ok(ScaleEntry {
        index: m.index,
        height: m.height,
        width: m.width,
        noise_amp: m.noise_amp,
        generator: write_blob(dir, file("G"), &encode_tensors(&m.generator.parameters()))?,
        discriminator: write_blob(dir, file("D"), &encode_tensors(&m.discriminator.parameters()))?,
        injectors,
    })
}

/// Writes the checkpoint incrementally as scales freeze. Installed as a
/// progress sink, it makes interrupted training resumable from the last
/// completed scale of every branch.
pub struct CheckpointWriter<'a> {
    dir: PathBuf,
    manifest: Mutex<Manifest>,
    inner: &'a dyn ProgressSink,
}

impl<'a> CheckpointWriter<'a> {
    /// Starts a checkpoint for `model`, writing everything trained so far.
    pub fn create(model: &MoganModel, dir: impl Into<PathBuf>, inner: &'a dyn ProgressSink) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let (h, w) = model.source.dims();
        let source = write_blob(&dir, "source.bin".into(), &encode_tensors(&[Tensor::new(model.source.data().to_vec(), &[3, h, w])]))?;
        let parts = model
            .roi
            .iter()
            .zip(&model.boxes)
            .enumerate()
            .map(|(i, (s, b))| (roi_label(i), s, Some(*b)))
            .chain(std::iter::once((BACKGROUND_LABEL.to_string(), &model.background, None)));
        let branches = parts
            .map(|(name, stack, roi)| {
                let scales = stack.scales.iter().map(|m| scale_entry(&dir, &name, m)).collect::<Result<Vec<_>>>()?;
                let pyramid_dims = (0..stack.pyramid.len()).map(|n| stack.dims(n)).collect();
                Ok(BranchEntry { name, kind: stack.kind, roi, seed: stack.seed, pyramid_dims, scales })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest =
            Manifest { format: FORMAT.into(), source, source_dims: (h, w), boxes: model.boxes.clone(), config: model.config.clone(), branches };
        write_manifest(&dir, &manifest)?;
        Ok(CheckpointWriter { dir, manifest: Mutex::new(manifest), inner })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest poisoned").clone()
    }
}

impl ProgressSink for CheckpointWriter<'_> {
    fn record(&self, record: &ProgressRecord) {
        self.inner.record(record);
    }

    fn scale_frozen(&self, branch: &str, scale: usize, stack: &BranchStack) -> Result<()> {
        let model = stack.model(scale).ok_or(Error::UntrainedScale(scale))?;
        let entry = scale_entry(&self.dir, branch, model)?;
        {
            let mut manifest = self.manifest.lock().expect("manifest poisoned");
            let b = manifest
                .branches
                .iter_mut()
                .find(|b| b.name == branch)
                .ok_or_else(|| Error::Checkpoint(format!("unknown branch `{branch}`")))?;
            b.scales.retain(|s| s.index != scale);
            b.scales.push(entry);
            b.scales.sort_by_key(|s| std::cmp::Reverse(s.index));
            write_manifest(&self.dir, &manifest)?;
        }
        self.inner.scale_frozen(branch, scale, stack)
    }
}

/// Writes every trained scale of `model` to `dir`.
pub fn save(model: &MoganModel, dir: impl AsRef<Path>) -> Result<Manifest> {
    Ok(CheckpointWriter::create(model, dir.as_ref(), &NullSink)?.manifest())
}

/// Verifies every blob digest without building the model.
pub fn verify(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    for blob in manifest.blobs() {
        read_blob(dir, blob)?;
    }
    Ok(manifest)
}

fn single_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut t = decode_tensors(bytes)?;
    if t.len() != 1 {
        return Err(Error::Checkpoint(format!("expected one tensor, found {}", t.len())));
    }
    Ok(t.remove(0))
}

/// Rebuilds a model from `dir`, refusing any blob whose digest differs
/// from the manifest.
pub fn load(dir: impl AsRef<Path>) -> Result<MoganModel> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    let (shape, data) = single_tensor(&read_blob(dir, &manifest.source)?)?;
    let (h, w) = manifest.source_dims;
    if shape != [3, h, w] {
        return Err(Error::ShapeMismatch { expected: vec![3, h, w], actual: shape });
    }
    let source = Image::from_planar(h, w, data)?;
    let mut model = MoganModel::new(&source, &manifest.boxes, manifest.config.clone())?;

    for entry in &manifest.branches {
        let stack = if entry.name == BACKGROUND_LABEL {
            &mut model.background
        } else {
            let i = (0..model.roi.len())
                .find(|&i| roi_label(i) == entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown branch `{}`", entry.name)))?;
            &mut model.roi[i]
        };
        if stack.seed != entry.seed || stack.kind != entry.kind {
            return Err(Error::Checkpoint(format!("branch `{}` does not match its configuration", entry.name)));
        }
        for s in &entry.scales {
            if stack.next_untrained() != Some(s.index) || stack.dims(s.index) != (s.height, s.width) {
                return Err(Error::Checkpoint(format!("branch `{}`: unexpected scale {}", entry.name, s.index)));
            }
            let mut m = ScaleModel::new(&mut Init::new(0), stack.kind, &stack.config, s.index, (s.height, s.width));
            load_into(&mut m.generator, decode_tensors(&read_blob(dir, &s.generator)?)?)?;
            load_into(&mut m.discriminator, decode_tensors(&read_blob(dir, &s.discriminator)?)?)?;
            match &s.injectors {
                Some(b) => load_into(&mut m.injectors, decode_tensors(&read_blob(dir, b)?)?)?,
                None if !m.injectors.is_empty() => {
                    return Err(Error::Checkpoint(format!("branch `{}` scale {} lacks injectors", entry.name, s.index)))
                }
                None => {}
            }
            m.noise_amp = s.noise_amp;
            m.frozen = true;
            stack.scales.push(m);
        }
    }
    Ok(model)
}
