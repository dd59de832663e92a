//! Locked-image text tuning of a toy two-tower model.
//!
//! The image tower is a frozen random projection; only the text tower
//! (embedding table + projection) receives gradients. Image embeddings are
//! computed once before the loop, so training has no path that could touch
//! image-tower weights; the tower digest is still recorded before and after.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod tokenizer;
pub mod tower;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::caption::CaptionSet;
use crate::pgm::{decode_pnm, PnmError};
use crate::shard::{epoch_batches, Sample};
pub use checkpoint::Checkpoint;
pub use loss::{contrastive_loss, LossError, LossOutput};
pub use optim::{Optimizer, OptimizerConfig};
pub use schedule::{ScheduleError, WarmupCosine};
pub use tokenizer::Tokenizer;
pub use tower::{ImageTower, TextTower, TowerError};

/// Steps averaged into [`TrainState::final_loss`].
pub const FINAL_LOSS_WINDOW: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{samples} training samples cannot fill one batch of {batch_size}")]
    TooFewSamples { samples: usize, batch_size: usize },
    #[error("sample {key}: {source}")]
    Image {
        key: String,
        #[source]
        source: PnmError,
    },
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("training diverged at step {}: {:?}", .0.step, .0.reason)]
    Diverged(Box<DivergenceReport>),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Declares a run diverged when the loss is non-finite, or exceeds
/// `loss_factor × initial loss` for `patience` consecutive steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergencePolicy {
    pub loss_factor: f64,
    pub patience: usize,
}

impl Default for DivergencePolicy {
    fn default() -> Self {
        Self {
            loss_factor: 1.0,
            patience: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub temperature: f64,
    pub d_model: usize,
    pub d_embed: usize,
    /// Std of the text tower's Gaussian init.
    pub text_init_std: f64,
    pub seed: u64,
    pub max_tokens: usize,
    pub optimizer: OptimizerConfig,
    pub divergence: DivergencePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.05,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 32,
            temperature: 0.07,
            d_model: 32,
            d_embed: 32,
            text_init_std: tower::DEFAULT_TEXT_INIT_STD,
            seed: 0,
            max_tokens: tokenizer::DEFAULT_MAX_TOKENS,
            optimizer: OptimizerConfig::default(),
            divergence: DivergencePolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad("peak_lr must be finite and positive");
        }
        if self.total_steps <= self.warmup_steps {
            return bad("total_steps must exceed warmup_steps");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be finite and positive");
        }
        if self.d_model == 0 || self.d_embed == 0 || self.max_tokens == 0 {
            return bad("d_model, d_embed and max_tokens must be positive");
        }
        if !(self.text_init_std.is_finite() && self.text_init_std > 0.0) {
            return bad("text_init_std must be finite and positive");
        }
        if self.divergence.patience == 0 {
            return bad("divergence.patience must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<WarmupCosine> {
        Ok(WarmupCosine::new(self.peak_lr, self.warmup_steps, self.total_steps)?)
    }
}

/// Learning rate at `step` under the config's warm-up + cosine schedule.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    Ok(cfg.schedule()?.lr_at(step)?)
}

/// Shuffle seed for one epoch, derived from the run seed.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decodes a sample's image into the flat pixel vector the image tower takes.
pub fn sample_pixels(sample: &Sample) -> Result<Vec<f64>> {
    decode_pnm(&sample.image_bytes)
        .map(|img| img.to_f64())
        .map_err(|source| TrainError::Image {
            key: sample.key.clone(),
            source,
        })
}

/// Training data with image embeddings precomputed by the frozen tower.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub keys: Vec<String>,
    pub image_embeddings: Vec<Vec<f64>>,
    pub token_ids: Vec<Vec<u32>>,
}

impl TrainingSet {
    pub fn prepare(samples: &[Sample], image: &ImageTower, tokenizer: &Tokenizer) -> Result<Self> {
        let mut ordered: Vec<&Sample> = samples.iter().collect();
        ordered.sort_by(|a, b| a.key.cmp(&b.key));
        let mut set = TrainingSet {
            keys: Vec::with_capacity(ordered.len()),
            image_embeddings: Vec::with_capacity(ordered.len()),
            token_ids: Vec::with_capacity(ordered.len()),
        };
        for sample in ordered {
            set.keys.push(sample.key.clone());
            set.image_embeddings.push(image.encode(&sample_pixels(sample)?)?);
            set.token_ids.push(tokenizer.tokenize(&sample.caption));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub mean_loss: f64,
    /// Zero-shot accuracy from the epoch hook, when one is installed.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,loss,wall_ms";

/// The per-step log as CSV with header `step,epoch,lr,loss,wall_ms`.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.lr, r.loss, r.wall_ms));
    }
    out
}

pub fn epochs_csv(rows: &[EpochSummary]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,steps,mean_loss,top1,top5\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.steps,
            r.mean_loss,
            opt(r.top1),
            opt(r.top5)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    NonFiniteLoss,
    LossAboveThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: u64,
    pub reason: DivergenceReason,
    pub initial_loss: f64,
    pub threshold: f64,
    pub last_loss: f64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub text_tower: TextTower,
    pub metrics: Vec<MetricRow>,
    pub epochs: Vec<EpochSummary>,
    pub initial_loss: f64,
    /// Mean loss over the last [`FINAL_LOSS_WINDOW`] steps.
    pub final_loss: f64,
    pub image_tower_digest: String,
}

/// Evaluated at the end of every epoch; returns `(top1, top5)` percentages.
pub type EpochHook<'a> = dyn FnMut(u64, &TextTower) -> Option<(f64, f64)> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Record elapsed milliseconds in `wall_ms`; when false it stays 0 and the
    /// metrics log is fully deterministic.
    pub record_wall_time: bool,
    pub epoch_hook: Option<Box<EpochHook<'a>>>,
}

struct DivergenceTracker {
    policy: DivergencePolicy,
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceTracker {
    fn observe(&mut self, loss: f64) -> Option<DivergenceReason> {
        if !loss.is_finite() {
            return Some(DivergenceReason::NonFiniteLoss);
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.policy.loss_factor * initial {
            self.streak += 1;
            if self.streak >= self.policy.patience {
                return Some(DivergenceReason::LossAboveThreshold);
            }
        } else {
            self.streak = 0;
        }
        None
    }
}

fn batch_forward(
    text: &TextTower,
    data: &TrainingSet,
    batch: &[usize],
    temperature: f64,
) -> std::result::Result<(Vec<tower::TextActivation>, LossOutput), TrainError> {
    let acts = batch
        .iter()
        .map(|&i| text.forward(&data.token_ids[i]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let images: Vec<Vec<f64>> = batch.iter().map(|&i| data.image_embeddings[i].clone()).collect();
    let texts: Vec<Vec<f64>> = acts.iter().map(|a| a.output.clone()).collect();
    let out = contrastive_loss(&images, &texts, temperature)?;
    Ok((acts, out))
}

/// Runs `total_steps` optimizer steps on the text tower.
///
/// Epoch `e` visits a permutation seeded by [`epoch_seed`]`(cfg.seed, e)`;
/// the short tail of each epoch is dropped.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainingSet,
    mut text: TextTower,
    image: &ImageTower,
    mut opts: TrainOptions<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(TrainError::TooFewSamples {
            samples: data.len(),
            batch_size: cfg.batch_size,
        });
    }
    let schedule = cfg.schedule()?;
    let digest_before = image.digest();
    let started = Instant::now();
    let mut optimizer = Optimizer::new(cfg.optimizer, &[text.embedding.len(), text.projection.len()]);
    let mut tracker = DivergenceTracker {
        policy: cfg.divergence,
        initial: None,
        streak: 0,
    };
    let mut metrics: Vec<MetricRow> = Vec::with_capacity(cfg.total_steps as usize);
    let mut epochs = Vec::new();

    let mut epoch = 0u64;
    let mut epoch_start = 0usize;
    let mut batches = epoch_batches(data.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))
        .expect("batch size validated")
        .into_iter();

    let record_wall_time = opts.record_wall_time;
    let mut hook = opts.epoch_hook.take();
    let mut close_epoch = |epoch: u64, rows: &[MetricRow], text: &TextTower, epochs: &mut Vec<EpochSummary>| {
        let accuracy = hook.as_mut().and_then(|hook| hook(epoch, text));
        epochs.push(EpochSummary {
            epoch,
            steps: rows.len() as u64,
            mean_loss: rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64,
            top1: accuracy.map(|a| a.0),
            top5: accuracy.map(|a| a.1),
        });
    };

    for step in 0..cfg.total_steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                close_epoch(epoch, &metrics[epoch_start..], &text, &mut epochs);
                epoch += 1;
                epoch_start = metrics.len();
                batches = epoch_batches(data.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))
                    .expect("batch size validated")
                    .into_iter();
                batches.next().expect("at least one full batch")
            }
        };
        let lr = schedule.lr_at(step)?;
        let (loss, pass) = match batch_forward(&text, data, &batch, cfg.temperature) {
            Ok((acts, out)) => (out.loss, Some((acts, out))),
            Err(TrainError::Tower(_) | TrainError::Loss(LossError::NonFinite)) => (f64::NAN, None),
            Err(e) => return Err(e),
        };
        metrics.push(MetricRow {
            step,
            epoch,
            lr,
            loss,
            wall_ms: if record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if let Some(reason) = tracker.observe(loss) {
            let initial_loss = tracker.initial.unwrap_or(f64::NAN);
            return Err(TrainError::Diverged(Box::new(DivergenceReport {
                step,
                reason,
                initial_loss,
                threshold: cfg.divergence.loss_factor * initial_loss,
                last_loss: loss,
                warmup_steps: cfg.warmup_steps,
                peak_lr: cfg.peak_lr,
                metrics,
            })));
        }
        let (acts, out) = pass.expect("finite loss implies a forward pass");
        let mut grads = text.zero_grads();
        for (act, g) in acts.iter().zip(&out.grad_texts) {
            text.backward(act, g, &mut grads);
        }
        let TextTower {
            embedding,
            projection,
            ..
        } = &mut text;
        optimizer.step(&mut [embedding, projection], &[&grads.embedding, &grads.projection], lr);
    }
    close_epoch(epoch, &metrics[epoch_start..], &text, &mut epochs);

    let digest_after = image.digest();
    assert_eq!(digest_before, digest_after, "image tower changed during training");
    let window = &metrics[metrics.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    Ok(TrainState {
        step: cfg.total_steps,
        initial_loss: metrics[0].loss,
        final_loss: window.iter().map(|r| r.loss).sum::<f64>() / window.len() as f64,
        text_tower: text,
        metrics,
        epochs,
        image_tower_digest: digest_after,
    })
}

/// Everything a zero-shot evaluation needs from a finished run.
#[derive(Clone, Debug)]
pub struct LitModel {
    pub tokenizer: Tokenizer,
    pub text_tower: TextTower,
    pub image_tower: ImageTower,
}

impl LitModel {
    /// Fresh towers for `captions`, with image input size `input_dim`.
    pub fn init(cfg: &TrainConfig, captions: &CaptionSet, input_dim: usize) -> Self {
        let tokenizer = Tokenizer::build(captions, cfg.max_tokens);
        Self {
            text_tower: TextTower::init_with_std(
                tokenizer.vocab_size(),
                cfg.d_model,
                cfg.d_embed,
                cfg.seed,
                cfg.text_init_std,
            ),
            image_tower: ImageTower::init(input_dim, cfg.d_embed, cfg.seed),
            tokenizer,
        }
    }
}

/// Builds the tokenizer and towers from `captions`, then trains on `samples`.
/// Returns the trained model and the run state.
pub fn train_on_samples(
    cfg: &TrainConfig,
    samples: &[Sample],
    captions: &CaptionSet,
    opts: TrainOptions<'_>,
) -> Result<(LitModel, TrainState)> {
    cfg.validate()?;
    let first = samples.first().ok_or(TrainError::TooFewSamples {
        samples: 0,
        batch_size: cfg.batch_size,
    })?;
    let input_dim = sample_pixels(first)?.len();
    let mut model = LitModel::init(cfg, captions, input_dim);
    let data = TrainingSet::prepare(samples, &model.image_tower, &model.tokenizer)?;
    let state = train(cfg, &data, model.text_tower.clone(), &model.image_tower, opts)?;
    model.text_tower = state.text_tower.clone();
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { warmup_steps: 2000, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
            TrainConfig { peak_lr: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"peak_lr": 0.1, "lr": 1}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"warmup_steps": 7}"#).unwrap();
        assert_eq!(cfg.warmup_steps, 7);
        assert_eq!(cfg.total_steps, 2000);
    }

    #[test]
    fn divergence_tracker() {
        let mut t = DivergenceTracker {
            policy: DivergencePolicy { loss_factor: 1.0, patience: 3 },
            initial: None,
            streak: 0,
        };
        assert_eq!(t.observe(2.0), None);
        assert_eq!(t.observe(2.5), None);
        assert_eq!(t.observe(1.0), None);
        assert_eq!(t.observe(2.1), None);
        assert_eq!(t.observe(2.1), None);
        assert_eq!(t.observe(2.1), Some(DivergenceReason::LossAboveThreshold));
        assert_eq!(t.observe(f64::INFINITY), Some(DivergenceReason::NonFiniteLoss));
    }

    #[test]
    fn metrics_csv_format() {
        let rows = [MetricRow { step: 0, epoch: 0, lr: 0.5, loss: 1.25, wall_ms: 3 }];
        assert_eq!(metrics_csv(&rows), "step,epoch,lr,loss,wall_ms\n0,0,0.5,1.25,3\n");
    }

    fn synthetic() -> (crate::caption::CaptionSet, Vec<Sample>) {
        use crate::caption::{generate_caption_set_with, CaptionOptions};
        use crate::synth::{generate_images, generate_taxonomy, SynthSpec};
        let spec = SynthSpec::default();
        let table = generate_taxonomy(&spec).unwrap();
        let captions = generate_caption_set_with(&table, &CaptionOptions::default()).unwrap();
        let train = generate_images(&spec, &table, &captions).unwrap().train;
        (captions, train)
    }

    #[test]
    fn image_tower_untouched_by_training() {
        let (captions, train) = synthetic();
        let cfg = TrainConfig { total_steps: 500, ..Default::default() };
        let model = LitModel::init(&cfg, &captions, 256);
        let before = model.image_tower.clone();
        let data = TrainingSet::prepare(&train, &model.image_tower, &model.tokenizer).unwrap();
        let state = train_fn(&cfg, &data, model.text_tower.clone(), &model.image_tower).unwrap();
        assert_eq!(model.image_tower, before);
        assert_eq!(state.image_tower_digest, before.digest());
        assert_ne!(state.text_tower, model.text_tower);
        assert_eq!(state.metrics.len(), 500);
        assert!(state.metrics.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    fn train_fn(cfg: &TrainConfig, data: &TrainingSet, text: TextTower, image: &ImageTower) -> Result<TrainState> {
        train(cfg, data, text, image, TrainOptions::default())
    }

    #[test]
    fn identical_runs_identical_logs() {
        let (captions, train) = synthetic();
        let cfg = TrainConfig { total_steps: 300, ..Default::default() };
        let run = || train_on_samples(&cfg, &train, &captions, TrainOptions::default()).unwrap();
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(metrics_csv(&sa.metrics), metrics_csv(&sb.metrics));
        assert_eq!(a.text_tower, b.text_tower);
        assert!(sa.metrics.iter().all(|r| r.wall_ms == 0));
    }

    #[test]
    fn epochs_cover_every_step() {
        let (captions, train) = synthetic();
        let cfg = TrainConfig { total_steps: 45, warmup_steps: 5, ..Default::default() };
        let mut calls = 0;
        let opts = TrainOptions {
            record_wall_time: false,
            epoch_hook: Some(Box::new(|_, _| {
                calls += 1;
                Some((1.0, 2.0))
            })),
        };
        let (_, state) = train_on_samples(&cfg, &train, &captions, opts).unwrap();
        // 640 samples / 32 = 20 steps per epoch
        assert_eq!(state.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(), vec![20, 20, 5]);
        assert_eq!(state.epochs[0].top5, Some(2.0));
        assert_eq!(calls, 3);
    }

    #[test]
    fn schedule_closed_form_everywhere() {
        for w in [500u64, 1000, 2000] {
            let cfg = TrainConfig { peak_lr: 1e-3, warmup_steps: w, total_steps: 4 * w, ..Default::default() };
            for step in 0..4 * w {
                let expect = if step < w {
                    1e-3 * (step + 1) as f64 / w as f64
                } else {
                    0.5 * 1e-3 * (1.0 + (std::f64::consts::PI * (step - w) as f64 / (3 * w) as f64).cos())
                };
                assert!((lr_at(step, &cfg).unwrap() - expect).abs() <= 1e-12);
            }
            assert_eq!(lr_at(w - 1, &cfg).unwrap(), 1e-3);
            assert_eq!(lr_at(w, &cfg).unwrap(), 1e-3);
            assert!(lr_at(4 * w - 1, &cfg).unwrap() <= lr_at(w, &cfg).unwrap());
        }
    }

    #[test]
    fn too_few_samples() {
        let (captions, train) = synthetic();
        let err = train_on_samples(&TrainConfig::default(), &train[..10], &captions, TrainOptions::default());
        assert!(matches!(err, Err(TrainError::TooFewSamples { samples: 10, .. })));
    }
}
