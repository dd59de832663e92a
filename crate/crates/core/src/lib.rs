//! Turn a label-only fine-grained image dataset into a captioned image-text
//! corpus and LiT-tune a small two-tower contrastive model on it.
//!
//! The stages, in pipeline order:
//!
//! - [`metadata`]: load and validate per-class metadata tables.
//! - [`caption`]: pick distinguishing columns and render one caption per class.
//! - [`synth`]: a synthetic taxonomy and class-conditional images for desk-scale runs.
//! - [`shard`]: webdataset-style ustar shards with a digest manifest.
//! - [`trainer`]: frozen image tower, trainable text tower, symmetric InfoNCE,
//!   warm-up + cosine schedule.
//! - [`zeroshot`]: caption-prompt class banks and top-k accuracy.
//! - [`pipeline`] and [`cli`]: config-driven orchestration and the `litforge` binary.

pub mod caption;
pub mod digest;
pub mod metadata;
pub mod pgm;
pub mod text;
pub mod shard;
pub mod synth;
pub mod trainer;
pub mod zeroshot;
pub mod pipeline;
pub mod cli;

/// Environment variable capping worker threads for parallel stages.
pub const THREADS_ENV: &str = "LITFORGE_THREADS";

/// Worker count for parallel stages: `LITFORGE_THREADS` if set to a positive
/// integer, otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
