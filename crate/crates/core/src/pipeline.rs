//! File-level stages and their orchestration.
//!
//! Each stage reads and writes only the documented artifacts, so the
//! `pipeline` run and a chain of single-stage CLI calls produce the same
//! run directory:
//!
//! ```text
//! run/
//!   config.resolved.json   metadata.csv   labels.csv   images/*.pgm
//!   captions.json          shards/{train,holdout}/{shard-*.tar,manifest.json}
//!   checkpoint.json        metrics.csv    epochs.csv   train_summary.json
//!   eval_report.json       per_class.csv  run_report.json
//! ```
//!
//! Wall-clock values appear only in `metrics.csv` (`wall_ms`) and under the
//! `wall_time` key of `train_summary.json` and `run_report.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::caption::{generate_caption_set_with, select_columns_with, CaptionError, CaptionOptions, CaptionSet, ColumnSelection};
use crate::digest::sha256_hex;
use crate::metadata::{load_metadata, validate_table, Finding, Format, MetadataError, MetadataTable};
use crate::shard::{read_shards, verify_manifest, write_shards, Sample, ShardError, ShardManifest, ShardSpec, VerificationReport, MANIFEST_FILE};
use crate::synth::{generate_images, generate_taxonomy, sample_meta, SynthError, SynthSpec, HOLDOUT_SPLIT, TRAIN_SPLIT};
use crate::trainer::checkpoint::CheckpointError;
use crate::trainer::{
    epochs_csv, metrics_csv, sample_pixels, train, Checkpoint, DivergenceReason, DivergenceReport, LitModel,
    TrainConfig, TrainError, TrainOptions, TrainingSet,
};
use crate::zeroshot::{build_class_bank, evaluate, evaluate_embeddings, EvalError, EvalReport};

pub const CONFIG_ECHO_FILE: &str = "config.resolved.json";
pub const METADATA_FILE: &str = "metadata.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGES_DIR: &str = "images";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const SHARDS_DIR: &str = "shards";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const DIVERGENCE_FILE: &str = "divergence.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PER_CLASS_FILE: &str = "per_class.csv";
pub const RUN_REPORT_FILE: &str = "run_report.json";

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const DIVERGED: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("training diverged at step {} ({:?}): loss {} vs initial {}", .0.step, .0.reason, .0.last_loss, .0.initial_loss)]
    Diverged(Box<DivergenceReport>),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => exit::CONFIG,
            PipelineError::Diverged(_) => exit::DIVERGED,
            _ => exit::DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn data(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

impl From<MetadataError> for PipelineError {
    fn from(e: MetadataError) -> Self {
        data(e)
    }
}

impl From<CaptionError> for PipelineError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::ZeroMaxColumns => PipelineError::Config(e.to_string()),
            e => data(e),
        }
    }
}

impl From<ShardError> for PipelineError {
    fn from(e: ShardError) -> Self {
        match e {
            ShardError::InvalidPattern(_) | ShardError::ZeroShardSize | ShardError::ZeroBatchSize => {
                PipelineError::Config(e.to_string())
            }
            e => data(e),
        }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => PipelineError::Config(e.to_string()),
            e => data(e),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(report) => PipelineError::Diverged(report),
            TrainError::InvalidConfig(_) | TrainError::Schedule(_) => PipelineError::Config(e.to_string()),
            e => data(e),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        data(e)
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        data(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Evaluate the holdout split after every training epoch.
    pub per_epoch: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { per_epoch: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// When set, overrides `synth.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub record_wall_time: bool,
    pub synth: SynthSpec,
    pub caption: CaptionOptions,
    pub shard: ShardSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("run"),
            record_wall_time: true,
            synth: SynthSpec::default(),
            caption: CaptionOptions::default(),
            shard: ShardSpec::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_bytes(&read(path)?)
    }

    /// Copy with the global seed pushed into each section.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if let Some(seed) = cfg.seed {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.shard.validate()?;
        self.train.validate()?;
        if self.caption.max_columns == 0 {
            return Err(CaptionError::ZeroMaxColumns.into());
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        pretty(self)
    }

    /// Writes the resolved-config echo into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write(&dir.join(CONFIG_ECHO_FILE), &self.resolved().to_json_bytes())
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingArtifact(path.to_path_buf())
        } else {
            PipelineError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Loads a metadata table, inferring the format from the extension unless
/// one is given.
pub fn load_table(path: &Path, format: Option<Format>) -> Result<MetadataTable> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    let format = format.or_else(|| Format::from_path(path)).unwrap_or(Format::Csv);
    Ok(load_metadata(path, format)?)
}

pub fn load_captions(path: &Path) -> Result<CaptionSet> {
    Ok(CaptionSet::from_json_bytes(&read(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub key: String,
    pub class_id: u64,
    pub split: String,
}

fn labels_csv(rows: &[LabelRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("label rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let bytes = read(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<LabelRow>, _>>()
        .map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Synthetic taxonomy (`metadata.csv`), images (`images/<key>.pgm`) and
/// their labels (`labels.csv`).
pub fn synth_stage(spec: &SynthSpec, out_dir: &Path) -> Result<MetadataTable> {
    spec.validate()?;
    let table = generate_taxonomy(spec)?;
    let captions = generate_caption_set_with(&table, &CaptionOptions::default())?;
    let splits = generate_images(spec, &table, &captions)?;
    let images = out_dir.join(IMAGES_DIR);
    create_dir(&images)?;
    write(&out_dir.join(METADATA_FILE), &table.to_csv_bytes())?;
    let mut labels = Vec::with_capacity(splits.train.len() + splits.holdout.len());
    let mut all: Vec<&Sample> = splits.train.iter().chain(&splits.holdout).collect();
    all.sort_by(|a, b| a.key.cmp(&b.key));
    for sample in all {
        write(&images.join(format!("{}.pgm", sample.key)), &sample.image_bytes)?;
        labels.push(LabelRow {
            key: sample.key.clone(),
            class_id: sample.class_id().expect("synthetic meta has class_id"),
            split: sample.split().expect("synthetic meta has split").to_string(),
        });
    }
    write(&out_dir.join(LABELS_FILE), &labels_csv(&labels))?;
    Ok(table)
}

/// Canonicalizes a metadata file into CSV at `out` and returns the findings.
pub fn aggregate_stage(input: &Path, format: Option<Format>, out: &Path) -> Result<Vec<Finding>> {
    let table = load_table(input, format)?;
    write(out, &table.to_csv_bytes())?;
    Ok(validate_table(&table))
}

pub fn select_columns_stage(table: &Path, format: Option<Format>, opts: &CaptionOptions) -> Result<ColumnSelection> {
    Ok(select_columns_with(&load_table(table, format)?, opts)?)
}

pub fn caption_stage(table: &Path, format: Option<Format>, opts: &CaptionOptions) -> Result<CaptionSet> {
    Ok(generate_caption_set_with(&load_table(table, format)?, opts)?)
}

/// Joins images, labels, captions and the table into samples and writes one
/// shard set per split under `out_dir/<split>/`.
pub fn shard_stage(
    images_dir: &Path,
    labels: &Path,
    captions: &CaptionSet,
    table: &MetadataTable,
    spec: &ShardSpec,
    out_dir: &Path,
) -> Result<BTreeMap<String, ShardManifest>> {
    spec.validate()?;
    let mut by_split: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for row in load_labels(labels)? {
        let record = table
            .record(row.class_id)
            .ok_or_else(|| data(format!("label {}: class {} not in the table", row.key, row.class_id)))?;
        let caption = captions
            .get(row.class_id)
            .ok_or_else(|| data(format!("label {}: no caption for class {}", row.key, row.class_id)))?;
        let image_bytes = read(&images_dir.join(format!("{}.pgm", row.key)))?;
        by_split.entry(row.split.clone()).or_default().push(Sample {
            key: row.key,
            image_bytes,
            caption: caption.to_string(),
            meta: sample_meta(record, &row.split),
        });
    }
    if by_split.is_empty() {
        return Err(ShardError::EmptyDataset.into());
    }
    let mut manifests = BTreeMap::new();
    for (split, samples) in by_split {
        let dir = out_dir.join(&split);
        create_dir(&dir)?;
        manifests.insert(split, write_shards(&samples, spec, &dir)?);
    }
    Ok(manifests)
}

pub fn verify_stage(manifest: &Path) -> Result<VerificationReport> {
    let path = if manifest.is_dir() {
        manifest.join(MANIFEST_FILE)
    } else {
        manifest.to_path_buf()
    };
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    Ok(verify_manifest(&ShardManifest::load(&path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTime {
    pub train_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub image_tower_digest: String,
    pub wall_time: WallTime,
}

/// Trains on the samples under `train_dir` and writes the checkpoint,
/// metrics, epoch summaries and `train_summary.json` to `out_dir`. A
/// diverged run writes `divergence.json` and its partial metrics instead.
///
/// With `holdout_dir`, zero-shot accuracy is logged after every epoch.
pub fn train_stage(
    cfg: &TrainConfig,
    train_dir: &Path,
    captions: &CaptionSet,
    holdout_dir: Option<&Path>,
    record_wall_time: bool,
    out_dir: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let samples = read_shards(train_dir)?;
    let first = samples.first().ok_or(ShardError::EmptyDataset)?;
    let mut model = LitModel::init(cfg, captions, sample_pixels(first)?.len());
    let data_set = TrainingSet::prepare(&samples, &model.image_tower, &model.tokenizer)?;

    let holdout = match holdout_dir {
        Some(dir) => {
            let samples = read_shards(dir)?;
            let mut embeddings = Vec::with_capacity(samples.len());
            let mut labels = Vec::with_capacity(samples.len());
            for s in &samples {
                embeddings.push(model.image_tower.encode(&sample_pixels(s)?).map_err(data)?);
                labels.push(s.class_id().ok_or_else(|| data(format!("sample {} has no class_id", s.key)))?);
            }
            Some((embeddings, labels))
        }
        None => None,
    };
    let tokenizer = model.tokenizer.clone();
    let opts = TrainOptions {
        record_wall_time,
        epoch_hook: holdout.as_ref().map(|(embeddings, labels)| {
            Box::new(move |_epoch: u64, text: &crate::trainer::TextTower| {
                let bank = build_class_bank(captions, &tokenizer, text).ok()?;
                let report = evaluate_embeddings(embeddings, labels, &bank).ok()?;
                Some((report.top1, report.top5))
            }) as Box<crate::trainer::EpochHook<'_>>
        }),
    };

    let state = match train(cfg, &data_set, model.text_tower.clone(), &model.image_tower, opts) {
        Ok(state) => state,
        Err(TrainError::Diverged(report)) => {
            write(&out_dir.join(METRICS_FILE), metrics_csv(&report.metrics).as_bytes())?;
            write(&out_dir.join(DIVERGENCE_FILE), &pretty(&report))?;
            return Err(PipelineError::Diverged(report));
        }
        Err(e) => return Err(e.into()),
    };
    model.text_tower = state.text_tower.clone();
    Checkpoint::new(cfg, &model).save(&out_dir.join(CHECKPOINT_FILE))?;
    write(&out_dir.join(METRICS_FILE), metrics_csv(&state.metrics).as_bytes())?;
    write(&out_dir.join(EPOCHS_FILE), epochs_csv(&state.epochs).as_bytes())?;
    let summary = TrainSummary {
        steps: state.step,
        epochs: state.epochs.len(),
        initial_loss: state.initial_loss,
        final_loss: state.final_loss,
        image_tower_digest: state.image_tower_digest.clone(),
        wall_time: WallTime {
            train_ms: state.metrics.last().map_or(0, |r| r.wall_ms),
        },
    };
    write(&out_dir.join(TRAIN_SUMMARY_FILE), &pretty(&summary))?;
    Ok(summary)
}

/// Zero-shot evaluation of a checkpoint on the samples under `holdout_dir`;
/// writes `eval_report.json` and `per_class.csv` to `out_dir`.
pub fn eval_stage(checkpoint: &Path, captions: &CaptionSet, holdout_dir: &Path, out_dir: &Path) -> Result<EvalReport> {
    if !checkpoint.exists() {
        return Err(PipelineError::MissingArtifact(checkpoint.to_path_buf()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = serde_json::to_value(&ckpt.config).expect("config serializes");
    let model = ckpt.into_model();
    let samples = read_shards(holdout_dir)?;
    let bank = build_class_bank(captions, &model.tokenizer, &model.text_tower)?;
    let mut report = evaluate(&samples, &model.image_tower, &bank)?;
    report.config = config;
    create_dir(out_dir)?;
    write(&out_dir.join(EVAL_REPORT_FILE), &report.to_json_bytes())?;
    write(&out_dir.join(PER_CLASS_FILE), report.per_class_csv().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub step: u64,
    pub reason: DivergenceReason,
    pub initial_loss: f64,
    pub last_loss: f64,
}

/// One row of an ablation table: everything needed to compare runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Value,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Manifest digest per split.
    pub manifests: BTreeMap<String, String>,
    pub shard_digests: BTreeMap<String, Vec<String>>,
    pub caption_set_digest: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub diverged: Option<DivergenceSummary>,
    pub wall_time: Option<WallTime>,
}

/// Joins a run directory's artifacts into `run_report.json`.
///
/// Needs the config echo, the train manifest, and either `divergence.json`
/// or the full train + eval outputs.
pub fn emit_run_report(run_dir: &Path) -> Result<RunReport> {
    let config: PipelineConfig = PipelineConfig::from_json_bytes(&read(&run_dir.join(CONFIG_ECHO_FILE))?)?;
    let shards = run_dir.join(SHARDS_DIR);
    let train_manifest = shards.join(TRAIN_SPLIT).join(MANIFEST_FILE);
    if !train_manifest.exists() {
        return Err(PipelineError::MissingArtifact(train_manifest));
    }
    let mut manifests = BTreeMap::new();
    let mut shard_digests = BTreeMap::new();
    for split in [TRAIN_SPLIT, HOLDOUT_SPLIT] {
        let path = shards.join(split).join(MANIFEST_FILE);
        if path.exists() {
            let m = ShardManifest::load(&path)?;
            manifests.insert(split.to_string(), m.digest());
            shard_digests.insert(split.to_string(), m.shards.iter().map(|s| s.digest.clone()).collect());
        }
    }
    let caption_set_digest = match load_captions(&run_dir.join(CAPTIONS_FILE)) {
        Ok(c) => Some(c.digest()),
        Err(PipelineError::MissingArtifact(_)) => None,
        Err(e) => return Err(e),
    };

    let mut report = RunReport {
        config: serde_json::to_value(&config).expect("config serializes"),
        warmup_steps: config.train.warmup_steps,
        peak_lr: config.train.peak_lr,
        manifests,
        shard_digests,
        caption_set_digest,
        checkpoint_digest: None,
        initial_loss: f64::NAN,
        final_loss: None,
        top1: None,
        top5: None,
        diverged: None,
        wall_time: None,
    };
    let divergence = run_dir.join(DIVERGENCE_FILE);
    if divergence.exists() {
        let d: DivergenceReport = read_json(&divergence)?;
        report.initial_loss = d.initial_loss;
        report.diverged = Some(DivergenceSummary {
            step: d.step,
            reason: d.reason,
            initial_loss: d.initial_loss,
            last_loss: d.last_loss,
        });
    } else {
        let summary: TrainSummary = read_json(&run_dir.join(TRAIN_SUMMARY_FILE))?;
        let eval: EvalReport = read_json(&run_dir.join(EVAL_REPORT_FILE))?;
        report.checkpoint_digest = Some(sha256_hex(&read(&run_dir.join(CHECKPOINT_FILE))?));
        report.initial_loss = summary.initial_loss;
        report.final_loss = Some(summary.final_loss);
        report.top1 = Some(eval.top1);
        report.top5 = Some(eval.top5);
        report.wall_time = Some(summary.wall_time);
    }
    write(&run_dir.join(RUN_REPORT_FILE), &pretty(&report))?;
    Ok(report)
}

/// Ablation table over run reports, one CSV row per run in input order.
pub fn ablation_csv(reports: &[(String, RunReport)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("run,warmup_steps,peak_lr,initial_loss,final_loss,top1,top5,diverged_at\n");
    for (name, r) in reports {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            r.warmup_steps,
            r.peak_lr,
            r.initial_loss,
            opt(r.final_loss),
            opt(r.top1),
            opt(r.top5),
            r.diverged.as_ref().map(|d| d.step.to_string()).unwrap_or_default()
        ));
    }
    out
}

/// Every stage in order into `cfg.out_dir`, finishing with the run report.
/// A diverged run still gets its run report before the error is returned.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    cfg.write_echo(out)?;

    let table = synth_stage(&cfg.synth, out)?;
    let captions = caption_stage(&out.join(METADATA_FILE), Some(Format::Csv), &cfg.caption)?;
    write(&out.join(CAPTIONS_FILE), &captions.to_json_bytes())?;
    let shards = out.join(SHARDS_DIR);
    shard_stage(&out.join(IMAGES_DIR), &out.join(LABELS_FILE), &captions, &table, &cfg.shard, &shards)?;
    let holdout = shards.join(HOLDOUT_SPLIT);
    let per_epoch = (cfg.eval.per_epoch && holdout.exists()).then_some(holdout.as_path());
    match train_stage(&cfg.train, &shards.join(TRAIN_SPLIT), &captions, per_epoch, cfg.record_wall_time, out) {
        Ok(_) => {}
        Err(PipelineError::Diverged(report)) => {
            emit_run_report(out)?;
            return Err(PipelineError::Diverged(report));
        }
        Err(e) => return Err(e),
    }
    eval_stage(&out.join(CHECKPOINT_FILE), &captions, &holdout, out)?;
    emit_run_report(out)
}
