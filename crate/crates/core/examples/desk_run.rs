//! Trains the bundled 64x64 scene with the desk profile and writes a few
//! samples. `cargo run --release -p mogan --example desk_run -- OUT_DIR`

use std::time::Instant;

use mogan::assets;
use mogan::model::MoganModel;
use mogan::trainer::{ProgressRecord, ProgressSink, TrainConfig};

struct Printer(Instant);

impl ProgressSink for Printer {
    fn record(&self, r: &ProgressRecord) {
        if r.step.is_multiple_of(50) {
            println!(
                "{:>7.1}s {:<10} scale {} step {:>4}  g {:+.3}  d {:+.3}  l1 {:.4}  l2 {:.4}  gp {:.3}",
                self.0.elapsed().as_secs_f64(),
                r.branch,
                r.scale,
                r.step,
                r.l0_g,
                r.l0_d,
                r.l1,
                r.l2,
                r.gp
            );
        }
    }
}

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "desk_run".into());
    std::fs::create_dir_all(&out)?;
    let mut model = MoganModel::new(&assets::toy64(), &[assets::toy64_roi()], TrainConfig::desk())?;
    for (label, stack) in model.stacks() {
        let dims: Vec<_> = (0..stack.pyramid.len()).map(|n| stack.dims(n)).collect();
        println!("{label}: {dims:?}");
    }
    let start = Instant::now();
    model.train(&Printer(start))?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    for seed in 0..4 {
        model.sample(seed)?.image.save_png(format!("{out}/sample_{seed}.png"))?;
    }
    mogan::checkpoint::save(&model, format!("{out}/checkpoint"))?;
    Ok(())
}
