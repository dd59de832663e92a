//! The two encoders. Both end in L2 normalization, so every embedding is a
//! unit vector and similarity is a plain dot product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::Hasher;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TowerError {
    #[error("expected {expected} inputs, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("non-finite values")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, TowerError>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length, returning the original norm.
pub fn normalize(v: &mut [f64]) -> Result<f64> {
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(TowerError::NonFinite);
    }
    if norm == 0.0 {
        return Err(TowerError::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(norm)
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// `y = x · W` for row vector `x` and row-major `W` of shape `x.len() × cols`.
fn project(x: &[f64], weights: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(weights.chunks_exact(cols)) {
        if *xi != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
    out
}

/// Frozen random linear projection of flattened pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTower {
    input_dim: usize,
    d_embed: usize,
    projection: Vec<f64>,
}

impl ImageTower {
    pub fn init(input_dim: usize, d_embed: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            input_dim,
            d_embed,
            projection: gaussian(&mut rng, input_dim * d_embed, 1.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn parameters(&self) -> &[f64] {
        &self.projection
    }

    pub fn encode(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        if pixels.len() != self.input_dim {
            return Err(TowerError::DimensionMismatch {
                expected: self.input_dim,
                found: pixels.len(),
            });
        }
        let mut z = project(pixels, &self.projection, self.d_embed);
        normalize(&mut z)?;
        Ok(z)
    }

    /// Digest over shape and the exact bit patterns of every weight.
    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.update(&(self.input_dim as u64).to_le_bytes())
            .update(&(self.d_embed as u64).to_le_bytes())
            .update_f64s(&self.projection);
        h.finish()
    }
}

/// Bag-of-words text encoder: mean of token embeddings, linear projection,
/// L2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextTower {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_embed: usize,
    /// `vocab_size × d_model`, row-major.
    pub embedding: Vec<f64>,
    /// `d_model × d_embed`, row-major.
    pub projection: Vec<f64>,
}

/// Intermediate values of one text encoding, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct TextActivation {
    pub ids: Vec<u32>,
    pub pooled: Vec<f64>,
    pub norm: f64,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextGrads {
    pub embedding: Vec<f64>,
    pub projection: Vec<f64>,
}

/// Default std of every text-tower weight at init.
///
/// The tower is scale-free (its output is normalized), so the init scale
/// only sets the effective size of the first updates, roughly `lr / ‖θ‖`.
/// A small init makes those early steps large unless the learning rate
/// is warmed up.
pub const DEFAULT_TEXT_INIT_STD: f64 = 1e-4;

impl TextTower {
    pub fn init(vocab_size: usize, d_model: usize, d_embed: usize, seed: u64) -> Self {
        Self::init_with_std(vocab_size, d_model, d_embed, seed, DEFAULT_TEXT_INIT_STD)
    }

    pub fn init_with_std(vocab_size: usize, d_model: usize, d_embed: usize, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Self {
            vocab_size,
            d_model,
            d_embed,
            embedding: gaussian(&mut rng, vocab_size * d_model, std),
            projection: gaussian(&mut rng, d_model * d_embed, std),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.embedding.len() + self.projection.len()
    }

    pub fn forward(&self, ids: &[u32]) -> Result<TextActivation> {
        if ids.is_empty() {
            return Err(TowerError::EmptyTokens);
        }
        let mut pooled = vec![0.0; self.d_model];
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(TowerError::TokenOutOfRange {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
            let row = &self.embedding[id as usize * self.d_model..][..self.d_model];
            pooled.iter_mut().zip(row).for_each(|(p, e)| *p += e);
        }
        let n = ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let mut output = project(&pooled, &self.projection, self.d_embed);
        let norm = normalize(&mut output)?;
        Ok(TextActivation {
            ids: ids.to_vec(),
            pooled,
            norm,
            output,
        })
    }

    pub fn encode(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(ids)?.output)
    }

    pub fn zero_grads(&self) -> TextGrads {
        TextGrads {
            embedding: vec![0.0; self.embedding.len()],
            projection: vec![0.0; self.projection.len()],
        }
    }

    /// Accumulates into `grads` the parameter gradient given `grad_output`,
    /// the loss gradient with respect to this activation's unit output.
    pub fn backward(&self, act: &TextActivation, grad_output: &[f64], grads: &mut TextGrads) {
        // through the normalization: (I - v vᵀ) g / ‖z‖
        let along = dot(grad_output, &act.output);
        let grad_z: Vec<f64> = grad_output
            .iter()
            .zip(&act.output)
            .map(|(g, v)| (g - along * v) / act.norm)
            .collect();
        let mut grad_pooled = vec![0.0; self.d_model];
        for (a, row) in self.projection.chunks_exact(self.d_embed).enumerate() {
            grad_pooled[a] = dot(row, &grad_z);
            let h = act.pooled[a];
            let grow = &mut grads.projection[a * self.d_embed..][..self.d_embed];
            grow.iter_mut().zip(&grad_z).for_each(|(g, dz)| *g += h * dz);
        }
        let n = act.ids.len() as f64;
        for &id in &act.ids {
            let grow = &mut grads.embedding[id as usize * self.d_model..][..self.d_model];
            grow.iter_mut().zip(&grad_pooled).for_each(|(g, dh)| *g += dh / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn image_outputs_unit_and_scale_free() {
        let tower = ImageTower::init(16, 8, 3);
        let pixels: Vec<f64> = (0..16).map(|i| (i * 17 % 255) as f64).collect();
        let a = tower.encode(&pixels).unwrap();
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = pixels.iter().map(|p| p * 3.5).collect();
        let b = tower.encode(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn image_errors() {
        let tower = ImageTower::init(4, 2, 0);
        assert_eq!(tower.encode(&[0.0; 4]), Err(TowerError::ZeroNorm));
        assert_eq!(
            tower.encode(&[1.0; 5]),
            Err(TowerError::DimensionMismatch { expected: 4, found: 5 })
        );
    }

    #[test]
    fn text_errors() {
        let tower = TextTower::init(5, 4, 4, 0);
        assert_eq!(tower.encode(&[]), Err(TowerError::EmptyTokens));
        assert_eq!(
            tower.encode(&[9]),
            Err(TowerError::TokenOutOfRange { id: 9, vocab_size: 5 })
        );
    }

    #[test]
    fn digest_tracks_bits() {
        let a = ImageTower::init(8, 4, 1);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.projection[3] = f64::from_bits(b.projection[3].to_bits() ^ 1);
        assert_ne!(a.digest(), b.digest());
    }

    proptest! {
        #[test]
        fn text_unit_norm_and_order_free(ids in prop::collection::vec(0u32..20, 1..12), seed: u64) {
            let tower = TextTower::init(20, 8, 6, seed);
            let a = tower.encode(&ids).unwrap();
            prop_assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
            let mut rev = ids.clone();
            rev.reverse();
            let b = tower.encode(&rev).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(tower.encode(&ids).unwrap(), a);
        }
    }
}
