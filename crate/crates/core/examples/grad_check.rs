// Finite-difference check of the text tower's backward pass through the
// symmetric contrastive loss, at two temperatures.
//
//     cargo run --example grad_check

use litforge::trainer::gradcheck::{grad_check, CheckBatch};
use litforge::trainer::{ImageTower, TextTower};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (vocab, d_model, d_embed, batch) = (12, 6, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let image = ImageTower::init(9, d_embed, 3);
    let images = (0..batch)
        .map(|_| {
            let pixels: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            image.encode(&pixels)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let token_ids = (0..batch)
        .map(|_| {
            let len = rng.random_range(2..=4);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect();
    let batch = CheckBatch { images, token_ids };

    // unit-scale weights keep the probe step small relative to each parameter
    let tower = TextTower::init_with_std(vocab, d_model, d_embed, 5, 1.0);
    for temperature in [0.07, 1.0] {
        let report = grad_check(&tower, &batch, temperature, 1e-5)?;
        println!(
            "tau {temperature:<4}  {} parameters  max relative error {:.2e} (parameter {})",
            report.checked, report.max_rel_error, report.worst_parameter
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
