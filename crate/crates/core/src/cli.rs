//! The `litforge` command line.
//!
//! Every subcommand accepts `--config <pipeline.json>` and the overrides
//! `--seed`, `--warmup`, `--peak-lr`, `--batch-size`, `--out`. Exit status:
//! 0 ok, 2 config error, 3 data error, 4 training diverged.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::metadata::Format;
use crate::pipeline::{
    ablation_csv, aggregate_stage, caption_stage, emit_run_report, eval_stage, exit, load_captions, load_table,
    run_pipeline, select_columns_stage, shard_stage, synth_stage, train_stage, verify_stage, PipelineConfig,
    PipelineError, Result,
};

#[derive(Parser, Debug)]
#[command(name = "litforge", version, about = "Caption, shard and LiT-tune label-only image datasets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Pipeline config JSON; sections not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Warm-up steps.
    #[arg(long, global = true)]
    warmup: Option<u64>,
    #[arg(long = "peak-lr", global = true)]
    peak_lr: Option<f64>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    /// Output directory (a file for `aggregate`, `select-columns`, `caption`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic taxonomy, images and labels.
    Synth,
    /// Load a metadata table (CSV or JSON), write it as canonical CSV and print findings.
    Aggregate(TableArgs),
    /// Print the greedy column selection for a table.
    SelectColumns(CaptionArgs),
    /// Generate the caption set for a table.
    Caption(CaptionArgs),
    /// Pack images, labels and captions into per-split ustar shards.
    Shard {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[command(flatten)]
        table: TableArgs,
    },
    /// Recompute shard digests and counts against a manifest.
    Verify {
        /// Manifest file or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// LiT-tune the text tower on a train shard set.
    Train {
        #[arg(long)]
        shards: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        /// Holdout shards for per-epoch zero-shot accuracy.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a checkpoint on holdout shards.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        shards: PathBuf,
    },
    /// All stages in order: synth, caption, shard, train, eval, report.
    Pipeline,
    /// Consolidated run report; with several runs, also an ablation table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TableArgs {
    #[arg(long)]
    table: PathBuf,
    /// Defaults to the file extension.
    #[arg(long)]
    format: Option<Format>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[command(flatten)]
    table: TableArgs,
    #[arg(long = "max-columns")]
    max_columns: Option<usize>,
    /// Template prefix, e.g. "A photo of a ".
    #[arg(long)]
    prefix: Option<String>,
}

impl Common {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).map_err(|e| match e {
                PipelineError::MissingArtifact(p) => PipelineError::Config(format!("{} not found", p.display())),
                e => e,
            })?,
            None => PipelineConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(w) = self.warmup {
            cfg.train.warmup_steps = w;
        }
        if let Some(lr) = self.peak_lr {
            cfg.train.peak_lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).expect("stdout JSON");
    let _ = writeln!(out);
}

fn write_or_print(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            let _ = std::io::stdout().lock().write_all(bytes);
            Ok(())
        }
    }
}

fn caption_options(cfg: &PipelineConfig, args: &CaptionArgs) -> crate::caption::CaptionOptions {
    let mut opts = cfg.caption.clone();
    if let Some(m) = args.max_columns {
        opts.max_columns = m;
    }
    if let Some(p) = &args.prefix {
        opts.template.prefix = p.clone();
    }
    opts
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.common.pipeline_config()?;
    let out_file = cli.common.out.as_deref();
    let out_dir = cfg.out_dir.as_path();
    match cli.command {
        Command::Synth => {
            cfg.write_echo(out_dir)?;
            let table = synth_stage(&cfg.synth, out_dir)?;
            eprintln!("{} classes written to {}", table.len(), out_dir.display());
        }
        Command::Aggregate(t) => {
            let out = out_file.ok_or_else(|| PipelineError::Config("aggregate needs --out <file.csv>".into()))?;
            print_json(&aggregate_stage(&t.table, t.format, out)?);
        }
        Command::SelectColumns(args) => {
            let opts = caption_options(&cfg, &args);
            let selection = select_columns_stage(&args.table.table, args.table.format, &opts)?;
            let mut bytes = serde_json::to_vec_pretty(&selection).expect("selection serializes");
            bytes.push(b'\n');
            write_or_print(out_file, &bytes)?;
        }
        Command::Caption(args) => {
            let opts = caption_options(&cfg, &args);
            let set = caption_stage(&args.table.table, args.table.format, &opts)?;
            for group in set.collisions() {
                eprintln!("warning: classes {group:?} share a caption");
            }
            write_or_print(out_file, &set.to_json_bytes())?;
        }
        Command::Shard { images, labels, captions, table } => {
            let table = load_table(&table.table, table.format)?;
            let captions = load_captions(&captions)?;
            let mut spec = cfg.shard.clone();
            if cli.common.seed.is_some() {
                spec.shuffle_seed = cli.common.seed;
            }
            let manifests = shard_stage(&images, &labels, &captions, &table, &spec, out_dir)?;
            for (split, m) in &manifests {
                eprintln!("{split}: {} samples in {} shards", m.total_samples, m.shards.len());
            }
        }
        Command::Verify { manifest } => {
            let report = verify_stage(&manifest)?;
            print_json(&report);
            if !report.passed() {
                return Err(PipelineError::Data(format!("{} failed verification", manifest.display())));
            }
        }
        Command::Train { shards, captions, holdout } => {
            cfg.write_echo(out_dir)?;
            let captions = load_captions(&captions)?;
            let summary = train_stage(
                &cfg.train,
                &shards,
                &captions,
                holdout.as_deref(),
                cfg.record_wall_time,
                out_dir,
            )?;
            print_json(&summary);
        }
        Command::Eval { checkpoint, captions, shards } => {
            let captions = load_captions(&captions)?;
            let report = eval_stage(&checkpoint, &captions, &shards, out_dir)?;
            eprintln!("top-1 {:.2}%  top-5 {:.2}%  ({} images)", report.top1, report.top5, report.n_images);
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            print_json(&report);
        }
        Command::Report { runs } => {
            let mut rows = Vec::with_capacity(runs.len());
            for run in &runs {
                rows.push((run.display().to_string(), emit_run_report(run)?));
            }
            if rows.len() == 1 {
                print_json(&rows[0].1);
            } else {
                print!("{}", ablation_csv(&rows));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_are_config_errors() {
        assert_eq!(run(["litforge", "frobnicate"]), exit::CONFIG);
        assert_eq!(run(["litforge", "train", "--peak-lr", "fast"]), exit::CONFIG);
        assert_eq!(run(["litforge", "--help"]), exit::OK);
    }

    #[test]
    fn overrides_apply_after_config() {
        let cli = Cli::try_parse_from(["litforge", "pipeline", "--warmup", "7", "--seed", "3", "--out", "x"]).unwrap();
        let cfg = cli.common.pipeline_config().unwrap();
        assert_eq!((cfg.train.warmup_steps, cfg.train.seed, cfg.synth.seed), (7, 3, 3));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn bad_override_values_fail_validation() {
        assert_eq!(run(["litforge", "pipeline", "--batch-size", "1", "--out", "/nonexistent/x"]), exit::CONFIG);
    }
}
