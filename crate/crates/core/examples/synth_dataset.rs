// Generate the synthetic taxonomy and its noisy prototype images, and show
// how far apart the classes sit compared with the pixel noise.
//
//     cargo run --example synth_dataset [num_classes] [noise_sigma]

use litforge::caption::{generate_caption_set_with, CaptionOptions};
use litforge::pgm::decode_pnm;
use litforge::synth::{generate_images, generate_taxonomy, prototypes, SynthSpec};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    describe(SynthSpec::default())
}

fn describe(spec: SynthSpec) -> Result<(), Box<dyn std::error::Error>> {
    let table = generate_taxonomy(&spec)?;
    for record in table.records().iter().take(4) {
        println!(
            "{:>2}  {:<24} {:<9} {}",
            record.class_id,
            record.value("common_name").unwrap_or(""),
            record.value("supercategory").unwrap_or(""),
            record.value("binomial").unwrap_or("")
        );
    }
    println!("    ... {} classes", table.len());

    let captions = generate_caption_set_with(&table, &CaptionOptions::default())?;
    let splits = generate_images(&spec, &table, &captions)?;
    println!(
        "{} train + {} holdout images of {}x{} pixels",
        splits.train.len(),
        splits.holdout.len(),
        spec.image_side,
        spec.image_side
    );
    println!("first caption: {:?}", splits.train[0].caption);

    let protos: Vec<Vec<f64>> = prototypes(&spec, &table)
        .into_iter()
        .map(|p| p.into_iter().map(f64::from).collect())
        .collect();
    let mut nearest = f64::INFINITY;
    for (i, a) in protos.iter().enumerate() {
        for b in &protos[i + 1..] {
            nearest = nearest.min(distance(a, b));
        }
    }
    let mut worst = 0.0f64;
    for sample in &splits.train {
        let pixels = decode_pnm(&sample.image_bytes)?.to_f64();
        let id = sample.class_id().expect("class id") as usize;
        worst = worst.max(distance(&pixels, &protos[id]));
    }
    println!("closest pair of prototypes: {nearest:.1}; furthest image from its prototype: {worst:.1}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut spec = SynthSpec::default();
    if let Some(n) = args.next() {
        spec.num_classes = n.parse()?;
    }
    if let Some(s) = args.next() {
        spec.noise_sigma = s.parse()?;
    }
    describe(spec)
}
