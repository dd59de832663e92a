// Every stage end to end into a run directory, once through the library
// and once through the command-line entry point, then compare the two.
//
//     cargo run --release --example full_pipeline [out_dir]

use std::path::Path;

use litforge::pipeline::{run_pipeline, PipelineConfig, CHECKPOINT_FILE, EVAL_REPORT_FILE, RUN_REPORT_FILE};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    pipeline_into(root.path())
}

fn pipeline_into(root: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PipelineConfig {
        out_dir: root.join("library"),
        record_wall_time: false,
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&cfg)?;
    println!(
        "loss {:.4} -> {:.4}, top-1 {:.2}%, top-5 {:.2}%",
        report.initial_loss,
        report.final_loss.unwrap_or(f64::NAN),
        report.top1.unwrap_or(f64::NAN),
        report.top5.unwrap_or(f64::NAN)
    );
    for (split, digest) in &report.manifests {
        println!("  {split:<8} manifest {}", &digest[..16]);
    }

    let mut names: Vec<String> = std::fs::read_dir(&cfg.out_dir)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    names.sort();
    println!("artifacts: {}", names.join(" "));

    // same run through the CLI; wall time is off so outputs match byte for byte
    let cli_dir = root.join("cli");
    let config = root.join("pipeline.json");
    std::fs::write(&config, br#"{"record_wall_time": false}"#)?;
    let args = ["litforge", "pipeline", "--config"].map(String::from).into_iter().chain([
        config.display().to_string(),
        "--out".into(),
        cli_dir.display().to_string(),
    ]);
    let status = litforge::cli::run(args);
    println!("cli exit status {status}");
    for file in [CHECKPOINT_FILE, EVAL_REPORT_FILE, "metrics.csv"] {
        let same = std::fs::read(cfg.out_dir.join(file))? == std::fs::read(cli_dir.join(file))?;
        println!("  {file:<18} identical: {same}");
    }
    println!("report at {}", cfg.out_dir.join(RUN_REPORT_FILE).display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    match std::env::args().nth(1) {
        Some(dir) => pipeline_into(Path::new(&dir)),
        None => run_example(),
    }
}
