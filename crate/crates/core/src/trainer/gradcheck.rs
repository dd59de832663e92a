//! Central finite-difference check of the text-tower backward pass.

use super::loss::contrastive_loss;
use super::tower::{TextGrads, TextTower};
use super::{Result, TrainError};

/// A small batch of fixed image embeddings and caption token ids.
#[derive(Clone, Debug)]
pub struct CheckBatch {
    pub images: Vec<Vec<f64>>,
    pub token_ids: Vec<Vec<u32>>,
}

pub fn batch_loss(tower: &TextTower, batch: &CheckBatch, temperature: f64) -> Result<f64> {
    let texts = batch
        .token_ids
        .iter()
        .map(|ids| tower.encode(ids))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(contrastive_loss(&batch.images, &texts, temperature)?.loss)
}

/// Loss and analytic gradient of every text-tower parameter.
pub fn analytic_grads(tower: &TextTower, batch: &CheckBatch, temperature: f64) -> Result<(f64, TextGrads)> {
    let acts = batch
        .token_ids
        .iter()
        .map(|ids| tower.forward(ids))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let texts: Vec<Vec<f64>> = acts.iter().map(|a| a.output.clone()).collect();
    let out = contrastive_loss(&batch.images, &texts, temperature)?;
    let mut grads = tower.zero_grads();
    for (act, g) in acts.iter().zip(&out.grad_texts) {
        tower.backward(act, g, &mut grads);
    }
    Ok((out.loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst parameter (embedding first, then projection).
    pub worst_parameter: usize,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning round-off into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic gradients with `(L(θ+ε) − L(θ−ε)) / 2ε` for every
/// text-tower parameter.
pub fn grad_check(tower: &TextTower, batch: &CheckBatch, temperature: f64, epsilon: f64) -> Result<GradCheckReport> {
    if batch.images.len() != batch.token_ids.len() || batch.images.is_empty() {
        return Err(TrainError::InvalidConfig("grad check needs a matched, non-empty batch".into()));
    }
    let (_, grads) = analytic_grads(tower, batch, temperature)?;
    let analytic: Vec<f64> = grads.embedding.iter().chain(&grads.projection).copied().collect();
    let mut probe = tower.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: 0,
        checked: analytic.len(),
    };
    for (index, &a) in analytic.iter().enumerate() {
        let numeric = {
            let slot = param_mut(&mut probe, index);
            let original = *slot;
            *slot = original + epsilon;
            let plus = batch_loss_unchecked(&probe, batch, temperature)?;
            *param_mut(&mut probe, index) = original - epsilon;
            let minus = batch_loss_unchecked(&probe, batch, temperature)?;
            *param_mut(&mut probe, index) = original;
            (plus - minus) / (2.0 * epsilon)
        };
        let err = relative_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_parameter = index;
        }
    }
    Ok(report)
}

fn batch_loss_unchecked(tower: &TextTower, batch: &CheckBatch, temperature: f64) -> Result<f64> {
    batch_loss(tower, batch, temperature)
}

fn param_mut(tower: &mut TextTower, index: usize) -> &mut f64 {
    let n = tower.embedding.len();
    if index < n {
        &mut tower.embedding[index]
    } else {
        &mut tower.projection[index - n]
    }
}
