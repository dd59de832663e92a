// Warm-up ablation at an aggressive peak learning rate: one full pipeline
// run per warm-up length, collected into a single ablation table.
//
//     cargo run --release --example warmup_ablation [peak_lr]

use litforge::pipeline::{ablation_csv, emit_run_report, run_pipeline, PipelineConfig, PipelineError};
use litforge::trainer::lr_at;

const WARMUPS: [u64; 4] = [0, 25, 100, 500];

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    ablate(5.0)
}

fn ablate(peak_lr: f64) -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let mut rows = Vec::new();
    for warmup in WARMUPS {
        let mut cfg = PipelineConfig::default();
        cfg.train.peak_lr = peak_lr;
        cfg.train.warmup_steps = warmup;
        cfg.eval.per_epoch = false;
        cfg.record_wall_time = false;
        cfg.out_dir = root.path().join(format!("w{warmup}"));

        let probes: Vec<String> = [0, warmup / 2, warmup, cfg.train.total_steps - 1]
            .iter()
            .map(|&s| Ok(format!("{s}:{:.3}", lr_at(s, &cfg.train)?)))
            .collect::<Result<_, litforge::trainer::TrainError>>()?;
        println!("W={warmup:<4} lr at steps {}", probes.join(" "));

        let report = match run_pipeline(&cfg) {
            Ok(report) => report,
            // the run report is still written for diverged runs
            Err(PipelineError::Diverged(_)) => emit_run_report(&cfg.out_dir)?,
            Err(e) => return Err(e.into()),
        };
        rows.push((format!("warmup_{warmup}"), report));
    }
    println!();
    print!("{}", ablation_csv(&rows));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let peak_lr = match std::env::args().nth(1) {
        Some(lr) => lr.parse()?,
        None => 5.0,
    };
    ablate(peak_lr)
}
