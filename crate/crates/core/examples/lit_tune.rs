// LiT-tune the text tower on the default synthetic dataset and track
// zero-shot accuracy on the holdout split after every epoch.
//
//     cargo run --release --example lit_tune [peak_lr] [warmup_steps]

use litforge::caption::{generate_caption_set_with, CaptionOptions};
use litforge::synth::{generate_images, generate_taxonomy, SynthSpec};
use litforge::trainer::{sample_pixels, train_on_samples, TrainConfig, TrainOptions};
use litforge::zeroshot::{build_class_bank, evaluate, evaluate_embeddings};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    tune(TrainConfig::default())
}

fn tune(cfg: TrainConfig) -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec::default();
    let table = generate_taxonomy(&spec)?;
    let captions = generate_caption_set_with(&table, &CaptionOptions::default())?;
    let splits = generate_images(&spec, &table, &captions)?;
    println!(
        "{} classes, {} train / {} holdout images, caption columns {:?}",
        table.len(),
        splits.train.len(),
        splits.holdout.len(),
        captions.selection.columns
    );

    // holdout embeddings are fixed because the image tower is frozen
    let holdout_pixels = splits
        .holdout
        .iter()
        .map(sample_pixels)
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u64> = splits.holdout.iter().map(|s| s.class_id().unwrap()).collect();
    let probe = litforge::trainer::LitModel::init(&cfg, &captions, holdout_pixels[0].len());
    let holdout_embeddings = holdout_pixels
        .iter()
        .map(|p| probe.image_tower.encode(p))
        .collect::<Result<Vec<_>, _>>()?;

    let hook = |_epoch: u64, text: &litforge::trainer::TextTower| {
        let bank = build_class_bank(&captions, &probe.tokenizer, text).ok()?;
        let report = evaluate_embeddings(&holdout_embeddings, &labels, &bank).ok()?;
        Some((report.top1, report.top5))
    };
    let opts = TrainOptions {
        record_wall_time: true,
        epoch_hook: Some(Box::new(hook)),
    };
    let (model, state) = match train_on_samples(&cfg, &splits.train, &captions, opts) {
        Ok(done) => done,
        Err(litforge::trainer::TrainError::Diverged(report)) => {
            println!(
                "diverged at step {} ({:?}): initial loss {:.4}, last {:.4}",
                report.step, report.reason, report.initial_loss, report.last_loss
            );
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let last = state.epochs.len().saturating_sub(1);
    for e in state.epochs.iter().filter(|e| e.epoch % 10 == 0 || e.epoch as usize == last) {
        println!(
            "epoch {:>3}  loss {:.4}  top1 {:>6.2}  top5 {:>6.2}",
            e.epoch,
            e.mean_loss,
            e.top1.unwrap_or(f64::NAN),
            e.top5.unwrap_or(f64::NAN)
        );
    }
    let bank = build_class_bank(&captions, &model.tokenizer, &model.text_tower)?;
    let report = evaluate(&splits.holdout, &model.image_tower, &bank)?;
    println!(
        "initial loss {:.4} → final {:.4}; holdout top-1 {:.2}%, top-5 {:.2}% (chance {:.2}%)",
        state.initial_loss,
        state.final_loss,
        report.top1,
        report.top5,
        100.0 / table.len() as f64
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::default();
    if let Some(lr) = args.next() {
        cfg.peak_lr = lr.parse()?;
    }
    if let Some(w) = args.next() {
        cfg.warmup_steps = w.parse()?;
    }
    tune(cfg)
}
