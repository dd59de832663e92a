// Zero-shot classification: embed every class caption, rank classes for a
// few holdout images, and compare an untrained text tower with a tuned one.
//
//     cargo run --release --example zero_shot

use litforge::caption::{generate_caption_set_with, CaptionOptions};
use litforge::synth::{generate_images, generate_taxonomy, SynthSpec};
use litforge::trainer::{sample_pixels, train_on_samples, LitModel, TrainConfig, TrainOptions};
use litforge::zeroshot::{build_class_bank, classify, evaluate, TOP_K};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec::default();
    let table = generate_taxonomy(&spec)?;
    let captions = generate_caption_set_with(&table, &CaptionOptions::default())?;
    let splits = generate_images(&spec, &table, &captions)?;
    let cfg = TrainConfig::default();

    let input_dim = spec.image_side * spec.image_side;
    let untrained = LitModel::init(&cfg, &captions, input_dim);
    let bank = build_class_bank(&captions, &untrained.tokenizer, &untrained.text_tower)?;
    let before = evaluate(&splits.holdout, &untrained.image_tower, &bank)?;
    println!("untrained: top-1 {:.2}%  top-5 {:.2}%", before.top1, before.top5);

    let (model, _) = train_on_samples(&cfg, &splits.train, &captions, TrainOptions::default())?;
    let bank = build_class_bank(&captions, &model.tokenizer, &model.text_tower)?;
    let after = evaluate(&splits.holdout, &model.image_tower, &bank)?;
    println!("tuned:     top-1 {:.2}%  top-5 {:.2}%", after.top1, after.top5);
    println!("bank digest {}", &bank.digest()[..16]);

    for sample in splits.holdout.iter().step_by(40).take(3) {
        let embedding = model.image_tower.encode(&sample_pixels(sample)?)?;
        let ranked = classify(&embedding, &bank, TOP_K)?;
        println!("\nimage {} (class {}):", sample.key, sample.class_id().unwrap_or(u64::MAX));
        for id in ranked {
            println!("  {id:>2}  {}", captions.get(id).unwrap_or("?"));
        }
    }

    println!("\nper class:");
    for line in after.per_class_csv().lines().take(5) {
        println!("  {line}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
