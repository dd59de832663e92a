//! Symmetric InfoNCE over a batch of matched (image, text) unit vectors.

use super::tower::dot;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("batch sizes differ: {images} images, {texts} texts")]
    BatchMismatch { images: usize, texts: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("temperature must be finite and positive")]
    BadTemperature,
    #[error("non-finite embedding values")]
    NonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d text embedding, one row per text.
    pub grad_texts: Vec<Vec<f64>>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Logits `L_ij = u_i · v_j / τ`; the loss averages image→text
/// (row-wise) and text→image (column-wise) softmax cross-entropy with the
/// diagonal as target.
pub fn contrastive_loss(images: &[Vec<f64>], texts: &[Vec<f64>], temperature: f64) -> Result<LossOutput, LossError> {
    let b = images.len();
    if b != texts.len() {
        return Err(LossError::BatchMismatch {
            images: b,
            texts: texts.len(),
        });
    }
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(LossError::BadTemperature);
    }
    if images.iter().chain(texts).flatten().any(|x| !x.is_finite()) {
        return Err(LossError::NonFinite);
    }

    let logits: Vec<Vec<f64>> = images
        .iter()
        .map(|u| texts.iter().map(|v| dot(u, v) / temperature).collect())
        .collect();
    let row_lse: Vec<f64> = logits.iter().map(|row| log_sum_exp(row.iter().copied())).collect();
    let col_lse: Vec<f64> = (0..b)
        .map(|j| log_sum_exp(logits.iter().map(move |row| row[j])))
        .collect();

    let row_loss: f64 = (0..b).map(|i| row_lse[i] - logits[i][i]).sum::<f64>() / b as f64;
    let col_loss: f64 = (0..b).map(|j| col_lse[j] - logits[j][j]).sum::<f64>() / b as f64;
    let loss = 0.5 * (row_loss + col_loss);

    // dL/dL_ij = ((p_ij - δ_ij) + (q_ij - δ_ij)) / 2B, with p row- and q column-softmax
    let scale = 1.0 / (2.0 * b as f64);
    let d = texts[0].len();
    let mut grad_texts = vec![vec![0.0; d]; b];
    for (i, row) in logits.iter().enumerate() {
        for (j, &l) in row.iter().enumerate() {
            let target = if i == j { 2.0 } else { 0.0 };
            let g = scale * ((l - row_lse[i]).exp() + (l - col_lse[j]).exp() - target) / temperature;
            if g != 0.0 {
                grad_texts[j]
                    .iter_mut()
                    .zip(&images[i])
                    .for_each(|(gv, u)| *gv += g * u);
            }
        }
    }
    Ok(LossOutput { loss, grad_texts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_batch_is_zero() {
        let out = contrastive_loss(&[vec![0.6, 0.8]], &[vec![1.0, 0.0]], 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_texts[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_by_two_closed_form() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = contrastive_loss(&e, &e, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn loss_positive_for_finite_logits() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(contrastive_loss(&e, &e, 0.05).unwrap().loss > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let a = vec![vec![1.0, 0.0]];
        assert_eq!(
            contrastive_loss(&a, &[], 1.0),
            Err(LossError::BatchMismatch { images: 1, texts: 0 })
        );
        assert_eq!(contrastive_loss(&[], &[], 1.0), Err(LossError::EmptyBatch));
        assert_eq!(contrastive_loss(&a, &a, 0.0), Err(LossError::BadTemperature));
        assert_eq!(
            contrastive_loss(&[vec![f64::NAN, 0.0]], &a, 1.0),
            Err(LossError::NonFinite)
        );
    }

    #[test]
    fn random_embeddings_near_log_batch() {
        use crate::trainer::tower::normalize;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, StandardNormal};

        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..64)
                .map(|_| {
                    let mut v: Vec<f64> = (0..64).map(|_| StandardNormal.sample(rng)).collect();
                    normalize(&mut v).unwrap();
                    v
                })
                .collect()
        };
        let mean = (0..5u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (u, v) = (draw(&mut rng), draw(&mut rng));
                contrastive_loss(&u, &v, 1.0).unwrap().loss
            })
            .sum::<f64>()
            / 5.0;
        assert!((mean - 64f64.ln()).abs() < 0.15, "{mean}");
    }
}
