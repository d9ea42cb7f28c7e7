use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mogan::assets;
use mogan::augment::{AugmentDescriptor, AugmentKind};
use mogan::checkpoint;
use mogan::imaging::{Image, RoiBox};
use mogan_app::ops;
use mogan_app::store::{ProjectStatus, Store};
use tempfile::TempDir;

const ITERS: &str = "3";

fn mogan(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mogan"))
        .args(args)
        .env("MOGAN_HOME", home)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to run mogan")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "mogan failed ({:?}): {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn roi_arg(b: RoiBox) -> String {
    format!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max)
}

struct Trained {
    home: TempDir,
    id: String,
}

impl Trained {
    fn store(&self) -> Store {
        Store::open(self.home.path()).unwrap()
    }
}

fn train(home: &Path, seed: &str) -> String {
    let image = home.join("toy32.png");
    assets::toy32().save_png(&image).unwrap();
    let out = mogan(
        home,
        &["train", image.to_str().unwrap(), "--roi", &roi_arg(assets::toy32_roi()), "--seed", seed, "--iters", ITERS],
    );
    stdout(&out).trim().to_string()
}

/// One small trained project shared by the read-only tests.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let home = TempDir::new().unwrap();
        let id = train(home.path(), "7");
        Trained { home, id }
    })
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    files.sort();
    files
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let t = trained();
    let store = t.store();
    let project = store.project(&t.id).unwrap();
    assert_eq!(project.status, ProjectStatus::Trained);
    assert_eq!(project.config.iters_per_scale, 3);
    assert!(store.checkpoint_dir(&t.id).join("manifest.json").is_file());
    assert!(checkpoint::load(store.checkpoint_dir(&t.id)).unwrap().is_trained());
    let log = std::fs::read_to_string(store.progress_path(&t.id)).unwrap();
    assert!(log.lines().count() > 0);
}

#[test]
fn box_outside_the_image_is_a_validation_error() {
    let home = TempDir::new().unwrap();
    let image = home.path().join("toy32.png");
    assets::toy32().save_png(&image).unwrap();
    let out = mogan(home.path(), &["train", image.to_str().unwrap(), "--roi", "0,0,40,20"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mogan(home.path(), &["train", image.to_str().unwrap(), "--roi", "1,2,3"]);
    assert_eq!(out.status.code(), Some(2), "malformed boxes are rejected by argument parsing");
}

#[test]
fn unknown_project_exits_with_not_found() {
    let home = TempDir::new().unwrap();
    let out = mogan(home.path(), &["generate", "abc123"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn same_seed_retrains_to_identical_parameters() {
    let t = trained();
    let home = TempDir::new().unwrap();
    let again = train(home.path(), "7");
    let a = checkpoint::load(t.store().checkpoint_dir(&t.id)).unwrap();
    let b = checkpoint::load(Store::open(home.path()).unwrap().checkpoint_dir(&again)).unwrap();
    assert_eq!(a.digests(), b.digests());
}

#[test]
fn generate_writes_count_samples_reproducibly() {
    let t = trained();
    let out_a = TempDir::new().unwrap();
    let out_b = TempDir::new().unwrap();
    for out in [&out_a, &out_b] {
        let printed = stdout(&mogan(
            t.home.path(),
            &["generate", &t.id, "--count", "3", "--seed", "11", "--out", out.path().to_str().unwrap()],
        ));
        assert_eq!(printed.lines().count(), 3);
    }
    let (a, b) = (pngs(out_a.path()), pngs(out_b.path()));
    assert_eq!(a.len(), 3);
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(Image::load(pa).unwrap().dims(), (32, 32));
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
    assert_ne!(std::fs::read(&a[0]).unwrap(), std::fs::read(&a[1]).unwrap(), "sample i uses seed + i");
}

#[test]
fn stored_samples_regenerate_from_their_records() {
    let t = trained();
    let store = t.store();
    let project = store.project(&t.id).unwrap();
    let model = ops::load_model(&store, &project).unwrap();
    let written = ops::generate(&store, &project, &model, 2, 3, None).unwrap();
    for w in written {
        let rec = store.sample_record(&w.record.id).unwrap();
        let again = ops::regenerate(&store, &model, &rec).unwrap();
        assert_eq!(again.encode_png().unwrap(), std::fs::read(&w.path).unwrap());
    }
}

#[test]
fn animation_starts_at_the_identity_sample() {
    let t = trained();
    let out = TempDir::new().unwrap();
    stdout(&mogan(
        t.home.path(),
        &["animate", &t.id, "--kind", "rotation", "--frames", "2", "--seed", "4", "--out", out.path().to_str().unwrap()],
    ));
    let frames = pngs(out.path());
    assert_eq!(frames.len(), 2);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["kind"], "rotation");

    let store = t.store();
    let model = ops::load_model(&store, &store.project(&t.id).unwrap()).unwrap();
    let identity = model.sample_with(4, &[AugmentDescriptor::identity()]).unwrap();
    assert_eq!(std::fs::read(&frames[0]).unwrap(), identity.image.encode_png().unwrap());
    let last = model.sample_with(4, &[AugmentDescriptor::new(AugmentKind::Rotation, 1.0, 0).unwrap()]);
    assert!(last.is_ok());
    assert_ne!(std::fs::read(&frames[0]).unwrap(), std::fs::read(&frames[1]).unwrap());
}

/// Copies a patch inside the box to another place inside the box.
fn paste(source: &Image, from: (usize, usize), to: (usize, usize), side: usize) -> Image {
    let mut out = source.clone();
    for dy in 0..side {
        for dx in 0..side {
            for c in 0..3 {
                out.set(to.0 + dy, to.1 + dx, c, source.get(from.0 + dy, from.1 + dx, c));
            }
        }
    }
    out
}

#[test]
fn edit_changes_are_confined_to_the_roi() {
    let t = trained();
    let store = t.store();
    let model = ops::load_model(&store, &store.project(&t.id).unwrap()).unwrap();
    let source = store.source(&t.id).unwrap();
    let roi = assets::toy32_roi();
    let paste_box = RoiBox::new(18, 19, 26, 27);
    let edited = paste(&source, (6, 5), (paste_box.y_min, paste_box.x_min), 8);
    let edited_path = t.home.path().join("edited.png");
    edited.save_png(&edited_path).unwrap();

    let out = TempDir::new().unwrap();
    stdout(&mogan(
        t.home.path(),
        &["edit", &t.id, edited_path.to_str().unwrap(), "--seed", "2", "--out", out.path().to_str().unwrap()],
    ));
    let harmonized = Image::load(out.path().join("edit.png")).unwrap();
    // Through PNG like the CLI output.
    let plain = Image::decode(&model.edit(&source, 2).unwrap().image.encode_png().unwrap()).unwrap();
    assert_ne!(harmonized, plain, "different edits give different outputs");

    // Difference map against the unedited result under the same seed.
    let band = model.config.band_px;
    let grown = RoiBox::new(
        roi.x_min.saturating_sub(band),
        roi.y_min.saturating_sub(band),
        (roi.x_max + band).min(32),
        (roi.y_max + band).min(32),
    );
    let mut peak = (0.0, 0, 0);
    for y in 0..32 {
        for x in 0..32 {
            let d: f64 = (0..3).map(|c| (harmonized.get(y, x, c) - plain.get(y, x, c)).abs()).sum();
            if !grown.contains(y, x) {
                assert_eq!(d, 0.0, "edit leaked outside the ROI at ({y}, {x}): {d}");
            }
            if d > peak.0 {
                peak = (d, y, x);
            }
        }
    }
    assert!(grown.contains(peak.1, peak.2));
    let edit_id = pngs(&store.samples_dir(&t.id))
        .iter()
        .find_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            stem.ends_with(".input").then(|| stem.trim_end_matches(".input").to_string())
        })
        .unwrap();
    let record = store.sample_record(&edit_id).unwrap();
    assert_eq!(ops::regenerate(&store, &model, &record).unwrap().encode_png().unwrap(), harmonized.encode_png().unwrap());
}

#[test]
fn eval_prints_a_markdown_table() {
    let t = trained();
    let out = TempDir::new().unwrap();
    let table = stdout(&mogan(t.home.path(), &["eval", &t.id, "--samples", "2", "--out", out.path().to_str().unwrap()]));
    assert!(table.starts_with("| Metrics |"), "{table}");
    for row in ["SIFID", "Diversity", "GQI"] {
        assert!(table.contains(row), "{table}");
    }
    assert!(out.path().join("metrics.json").is_file());
}
