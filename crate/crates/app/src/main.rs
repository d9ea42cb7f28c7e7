use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mogan::augment::AugmentKind;
use mogan::imaging::{Image, RoiBox};
use mogan::metrics::render_markdown;
use mogan::trainer::{Profile, TrainConfig};
use mogan_app::ops::{self, TrainOverrides, TrainingJob};
use mogan_app::service::{self, AppState};
use mogan_app::store::{Store, HOME_VAR};
use mogan_app::Result;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mogan", version, about = "Train single-image generators with ROI and background branches")]
struct Cli {
    /// Project store root.
    #[arg(long, env = HOME_VAR, global = true, default_value = "mogan-home")]
    home: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project from an image and train it; prints the project id.
    Train {
        image: PathBuf,
        /// Region of interest `x0,y0,x1,y1` (max-exclusive). Repeatable.
        #[arg(long = "roi", required = true)]
        rois: Vec<RoiBox>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        /// Override iterations per scale.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        band_px: Option<usize>,
    },
    /// Random samples.
    Generate {
        project: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        band_px: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Harmonize an edited copy of the source image.
    Edit {
        project: String,
        edited: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frames sweeping one augmentation kind.
    Animate {
        project: String,
        #[arg(long)]
        kind: AugmentKind,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        level_max: f64,
        #[arg(long, default_value_t = 12.0)]
        fps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SIFID, diversity and quality index as a markdown table.
    Eval {
        project: String,
        #[arg(long, default_value_t = ops::DEFAULT_EVAL_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training status of a project as JSON.
    Status { project: String },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn copy_to(out: &Option<PathBuf>, src: &Path, name: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::copy(src, dir.join(name))?;
    }
    Ok(())
}

fn write_json(out: &Option<PathBuf>, name: &str, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), serde_json::to_vec_pretty(value)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let store = Store::open(&cli.home)?;
    match cli.command {
        Command::Train { image, rois, seed, profile, iters, band_px } => {
            let overrides = TrainOverrides { profile: Some(profile), seed: Some(seed), iters_per_scale: iters, band_px };
            let config = overrides.apply(&TrainConfig::default())?;
            let project = store.create_project(&Image::load(&image)?, &rois, config)?;
            eprintln!("training project {} ({} ROI boxes)", project.id, rois.len());
            TrainingJob::start(&store, &project.id, &TrainOverrides::default())?.run(&store)?;
            println!("{}", project.id);
        }
        Command::Generate { project, count, seed, band_px, out } => {
            let project = store.project(&project)?;
            let model = ops::load_model(&store, &project)?;
            for (i, w) in ops::generate(&store, &project, &model, count, seed, band_px)?.iter().enumerate() {
                copy_to(&out, &w.path, &format!("sample_{i:03}.png"))?;
                write_json(&out, &format!("sample_{i:03}.json"), &w.record)?;
                println!("{}", w.path.display());
            }
        }
        Command::Edit { project, edited, seed, out } => {
            let project = store.project(&project)?;
            let model = ops::load_model(&store, &project)?;
            let w = ops::edit(&store, &project, &model, &Image::load(&edited)?, seed)?;
            copy_to(&out, &w.path, "edit.png")?;
            write_json(&out, "edit.json", &w.record)?;
            println!("{}", w.path.display());
        }
        Command::Animate { project, kind, frames, level_max, fps, seed, out } => {
            let project = store.project(&project)?;
            let model = ops::load_model(&store, &project)?;
            let anim = ops::animate(&store, &project, &model, &ops::AnimateSpec { kind, frames, level_max, fps, seed })?;
            let names: Vec<String> = (0..anim.files.len()).map(|i| format!("frame_{i:03}.png")).collect();
            for (file, name) in anim.files.iter().zip(&names) {
                copy_to(&out, &store.project_dir(&project.id).join(file), name)?;
            }
            write_json(&out, "manifest.json", &json!({ "fps": anim.fps, "kind": anim.kind, "level_max": anim.level_max, "seed": anim.seed, "frames": names }))?;
            println!("{}", serde_json::to_string_pretty(&anim)?);
        }
        Command::Eval { project, samples, seed, out } => {
            let project = store.project(&project)?;
            let model = ops::load_model(&store, &project)?;
            let reports = ops::evaluate(&store, &project, &model, samples, seed)?;
            write_json(&out, "metrics.json", &reports)?;
            println!("{}", render_markdown(&[("MOGAN", reports.as_slice())]));
        }
        Command::Status { project } => {
            let project = store.project(&project)?;
            println!("{}", serde_json::to_string_pretty(&ops::stored_report(&store, &project))?);
        }
        Command::Serve { addr } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                service::serve(listener, AppState::new(store)).await
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code())
        }
    }
}

