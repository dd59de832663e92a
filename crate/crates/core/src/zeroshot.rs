//! Zero-shot classification against a bank of caption embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::caption::CaptionSet;
use crate::digest::Hasher;
use crate::shard::Sample;
use crate::trainer::tower::dot;
use crate::trainer::{sample_pixels, ImageTower, TextTower, Tokenizer, TowerError, TrainError};

/// Largest k reported; clipped to the class count.
pub const TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no caption for class {0}")]
    MissingCaption(u64),
    #[error("class bank is empty")]
    EmptyBank,
    #[error("no images to evaluate")]
    NoImages,
    #[error("k = {k} outside 1..={classes}")]
    BadK { k: usize, classes: usize },
    #[error("query has {found} dimensions, bank rows have {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("image {key}: label {label:?} is not a class in the bank")]
    UnknownLabel { key: String, label: Option<u64> },
    #[error("{images} embeddings but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error(transparent)]
    Tower(#[from] TowerError),
    #[error(transparent)]
    Sample(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    pub class_ids: Vec<u64>,
    /// Unit rows, in `class_ids` order.
    pub rows: Vec<Vec<f64>>,
    pub caption_set_digest: String,
    /// Classes sharing a caption, and therefore a row.
    pub collisions: Vec<Vec<u64>>,
}

impl ClassEmbeddingBank {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn d_embed(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        for (id, row) in self.class_ids.iter().zip(&self.rows) {
            h.update(&id.to_le_bytes()).update_f64s(row);
        }
        h.finish()
    }

    fn index_of(&self, class_id: u64) -> Option<usize> {
        self.class_ids.binary_search(&class_id).ok()
    }
}

/// One row per caption in the set, in ascending class id order.
pub fn build_class_bank(captions: &CaptionSet, tokenizer: &Tokenizer, tower: &TextTower) -> Result<ClassEmbeddingBank> {
    let ids: Vec<u64> = captions.captions.keys().copied().collect();
    build_class_bank_for(&ids, captions, tokenizer, tower)
}

/// Bank over exactly `class_ids`, each of which must have a caption.
pub fn build_class_bank_for(
    class_ids: &[u64],
    captions: &CaptionSet,
    tokenizer: &Tokenizer,
    tower: &TextTower,
) -> Result<ClassEmbeddingBank> {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    let rows = ids
        .iter()
        .map(|&id| {
            let caption = captions.get(id).ok_or(EvalError::MissingCaption(id))?;
            Ok(tower.encode(&tokenizer.tokenize(caption))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let collisions = captions
        .collisions()
        .into_iter()
        .map(|group| group.into_iter().filter(|id| ids.binary_search(id).is_ok()).collect::<Vec<_>>())
        .filter(|group| group.len() > 1)
        .collect();
    Ok(ClassEmbeddingBank {
        class_ids: ids,
        rows,
        caption_set_digest: captions.digest(),
        collisions,
    })
}

/// Bank row indices by descending score, ties by ascending class id.
fn ranking(query: &[f64], bank: &ClassEmbeddingBank) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    if query.len() != bank.d_embed() {
        return Err(EvalError::DimensionMismatch {
            expected: bank.d_embed(),
            found: query.len(),
        });
    }
    let scores: Vec<f64> = bank.rows.iter().map(|row| dot(query, row)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // class_ids are sorted, so index order is class id order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// The `k` best-matching class ids for a unit image embedding.
pub fn classify(image_embedding: &[f64], bank: &ClassEmbeddingBank, k: usize) -> Result<Vec<u64>> {
    if k == 0 || k > bank.len() {
        return Err(EvalError::BadK { k, classes: bank.len() });
    }
    Ok(ranking(image_embedding, bank)?
        .into_iter()
        .take(k)
        .map(|i| bank.class_ids[i])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// The k behind `top5`: 5, or the class count when smaller.
    pub top5_k: usize,
    pub n_images: usize,
    pub per_class_top1: BTreeMap<u64, f64>,
    pub per_class_count: BTreeMap<u64, usize>,
    pub bank_digest: String,
    pub caption_set_digest: String,
    pub collisions: Vec<Vec<u64>>,
    pub image_tower_digest: Option<String>,
    pub config: Value,
}

impl EvalReport {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class_id,count,top1\n");
        for (id, acc) in &self.per_class_top1 {
            out.push_str(&format!("{id},{},{acc}\n", self.per_class_count[id]));
        }
        out
    }
}

/// Top-1/top-k over precomputed unit image embeddings with known labels.
pub fn evaluate_embeddings(images: &[Vec<f64>], labels: &[u64], bank: &ClassEmbeddingBank) -> Result<EvalReport> {
    if images.len() != labels.len() {
        return Err(EvalError::LabelCount {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if images.is_empty() {
        return Err(EvalError::NoImages);
    }
    let targets = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            bank.index_of(label).ok_or_else(|| EvalError::UnknownLabel {
                key: format!("#{i}"),
                label: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let k = TOP_K.min(bank.len());
    let ranks = parallel_ranks(images, &targets, bank)?;

    let mut per_class: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let (mut hit1, mut hitk) = (0usize, 0usize);
    for (&label, &rank) in labels.iter().zip(&ranks) {
        let entry = per_class.entry(label).or_default();
        entry.0 += 1;
        if rank == 0 {
            hit1 += 1;
            entry.1 += 1;
        }
        if rank < k {
            hitk += 1;
        }
    }
    let n = images.len();
    Ok(EvalReport {
        top1: percent(hit1, n),
        top5: percent(hitk, n),
        top5_k: k,
        n_images: n,
        per_class_top1: per_class.iter().map(|(&id, &(c, h))| (id, percent(h, c))).collect(),
        per_class_count: per_class.iter().map(|(&id, &(c, _))| (id, c)).collect(),
        bank_digest: bank.digest(),
        caption_set_digest: bank.caption_set_digest.clone(),
        collisions: bank.collisions.clone(),
        image_tower_digest: None,
        config: Value::Null,
    })
}

/// Encodes each sample with the frozen tower and evaluates against `bank`.
/// Labels come from each sample's `class_id` metadata.
pub fn evaluate(samples: &[Sample], image: &ImageTower, bank: &ClassEmbeddingBank) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(EvalError::NoImages);
    }
    let mut embeddings = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for sample in samples {
        let label = sample.class_id();
        match label.filter(|&id| bank.index_of(id).is_some()) {
            Some(id) => labels.push(id),
            None => {
                return Err(EvalError::UnknownLabel {
                    key: sample.key.clone(),
                    label,
                })
            }
        }
        embeddings.push(image.encode(&sample_pixels(sample)?)?);
    }
    let mut report = evaluate_embeddings(&embeddings, &labels, bank)?;
    report.image_tower_digest = Some(image.digest());
    Ok(report)
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Rank of each image's target class, computed across worker threads.
/// Each image is scored independently, so the result does not depend on
/// the thread count.
fn parallel_ranks(images: &[Vec<f64>], targets: &[usize], bank: &ClassEmbeddingBank) -> Result<Vec<usize>> {
    let rank_of = |(query, &target): (&Vec<f64>, &usize)| -> Result<usize> {
        Ok(ranking(query, bank)?
            .iter()
            .position(|&i| i == target)
            .expect("target is a bank row"))
    };
    let threads = crate::worker_threads().min(images.len()).max(1);
    if threads == 1 {
        return images.iter().zip(targets).map(rank_of).collect();
    }
    let chunk = images.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .zip(targets.chunks(chunk))
            .map(|(imgs, tgts)| scope.spawn(move || imgs.iter().zip(tgts).map(rank_of).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for handle in handles {
            out.extend(handle.join().expect("eval worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tower::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: Vec<Vec<f64>>) -> ClassEmbeddingBank {
        ClassEmbeddingBank {
            class_ids: (0..rows.len() as u64).collect(),
            rows,
            caption_set_digest: String::new(),
            collisions: Vec::new(),
        }
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut v).unwrap();
        v
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Full similarity matrix, then a sort per image.
    fn brute_force(images: &[Vec<f64>], labels: &[u64], bank: &ClassEmbeddingBank, k: usize) -> (f64, f64) {
        let mut hits = (0, 0);
        for (img, &label) in images.iter().zip(labels) {
            let mut scored: Vec<(f64, u64)> = bank
                .rows
                .iter()
                .zip(&bank.class_ids)
                .map(|(row, &id)| (row.iter().zip(img).map(|(a, b)| a * b).sum(), id))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let pos = scored.iter().position(|&(_, id)| id == label).unwrap();
            hits.0 += usize::from(pos == 0);
            hits.1 += usize::from(pos < k);
        }
        (percent(hits.0, images.len()), percent(hits.1, images.len()))
    }

    #[test]
    fn exact_match_ranks_first() {
        let b = bank((0..10).map(|i| basis(10, i)).collect());
        assert_eq!(classify(&basis(10, 7), &b, 1).unwrap(), vec![7]);
        let mut all = classify(&basis(10, 7), &b, 10).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn ties_go_to_lower_class_id() {
        let row = vec![0.6, 0.8];
        let b = bank(vec![vec![1.0, 0.0], row.clone(), row]);
        assert_eq!(classify(&[0.6, 0.8], &b, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn bad_queries() {
        let b = bank(vec![basis(3, 0), basis(3, 1)]);
        assert!(matches!(classify(&[1.0, 0.0], &b, 1), Err(EvalError::DimensionMismatch { .. })));
        assert!(matches!(classify(&basis(3, 0), &b, 0), Err(EvalError::BadK { .. })));
        assert!(matches!(classify(&basis(3, 0), &b, 3), Err(EvalError::BadK { .. })));
        assert!(matches!(
            evaluate_embeddings(&[basis(3, 0)], &[9], &b),
            Err(EvalError::UnknownLabel { .. })
        ));
    }

    #[test]
    fn hand_built_three_by_three() {
        // similarities: image 0 → class 0; image 1 → class 2 first, class 1 second; image 2 → class 2
        let b = bank(vec![basis(3, 0), basis(3, 1), basis(3, 2)]);
        let mut img1 = vec![0.0, 0.6, 0.8];
        normalize(&mut img1).unwrap();
        let images = vec![basis(3, 0), img1, basis(3, 2)];
        let report = evaluate_embeddings(&images, &[0, 1, 2], &b).unwrap();
        assert!((report.top1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.top5, 100.0);
        assert_eq!(report.top5_k, 3);
        assert_eq!(report.per_class_top1[&1], 0.0);
    }

    #[test]
    fn single_class_is_perfect() {
        let b = bank(vec![vec![1.0, 0.0]]);
        let report = evaluate_embeddings(&[vec![0.0, 1.0], vec![-1.0, 0.0]], &[0, 0], &b).unwrap();
        assert_eq!((report.top1, report.top5), (100.0, 100.0));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let classes = rng.random_range(1..=64);
            let d = rng.random_range(2..=16);
            let b = bank((0..classes).map(|_| unit(&mut rng, d)).collect());
            let n = rng.random_range(1..=300);
            let images: Vec<_> = (0..n).map(|_| unit(&mut rng, d)).collect();
            let labels: Vec<u64> = (0..n).map(|_| rng.random_range(0..classes as u64)).collect();
            let report = evaluate_embeddings(&images, &labels, &b).unwrap();
            let (t1, tk) = brute_force(&images, &labels, &b, TOP_K.min(classes));
            assert_eq!((report.top1, report.top5), (t1, tk));
            let weighted: f64 = report
                .per_class_top1
                .iter()
                .map(|(id, acc)| acc * report.per_class_count[id] as f64)
                .sum::<f64>()
                / n as f64;
            assert!((weighted - report.top1).abs() < 1e-9);
        }
    }

    #[test]
    fn random_towers_score_near_chance() {
        let mut total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let b = bank((0..16).map(|_| unit(&mut rng, 32)).collect());
            let images: Vec<_> = (0..160).map(|_| unit(&mut rng, 32)).collect();
            let labels: Vec<u64> = (0..160).map(|i| i / 10).collect();
            total += evaluate_embeddings(&images, &labels, &b).unwrap().top1;
        }
        let mean = total / 5.0;
        assert!((mean - 6.25).abs() <= 4.0, "mean top-1 {mean}");
    }

    #[test]
    fn per_class_csv_layout() {
        let b = bank(vec![basis(2, 0), basis(2, 1)]);
        let report = evaluate_embeddings(&[basis(2, 0), basis(2, 0)], &[0, 1], &b).unwrap();
        assert_eq!(report.per_class_csv(), "class_id,count,top1\n0,1,100\n1,1,0\n");
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_ranking(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = bank((0..8).map(|_| unit(&mut rng, 6)).collect());
            let q = unit(&mut rng, 6);
            let scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            prop_assert_eq!(classify(&q, &b, 8).unwrap(), classify(&scaled, &b, 8).unwrap());
        }

        #[test]
        fn top_k_monotone_in_k(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = bank((0..12).map(|_| unit(&mut rng, 4)).collect());
            let images: Vec<_> = (0..40).map(|_| unit(&mut rng, 4)).collect();
            let labels: Vec<u64> = (0..40).map(|_| rng.random_range(0..12)).collect();
            let mut last = 0.0;
            for k in 1..=12 {
                let (_, acc) = brute_force(&images, &labels, &b, k);
                prop_assert!(acc >= last);
                last = acc;
            }
            let r = evaluate_embeddings(&images, &labels, &b).unwrap();
            prop_assert!(r.top1 <= r.top5);
        }
    }

    #[test]
    fn synthetic_bank_rows_are_unit() {
        use crate::caption::{generate_caption_set_with, CaptionOptions};
        use crate::synth::{generate_taxonomy, SynthSpec};
        use crate::trainer::TrainConfig;

        let table = generate_taxonomy(&SynthSpec::default()).unwrap();
        let captions = generate_caption_set_with(&table, &CaptionOptions::default()).unwrap();
        let model = crate::trainer::LitModel::init(&TrainConfig::default(), &captions, 256);
        let b = build_class_bank(&captions, &model.tokenizer, &model.text_tower).unwrap();
        assert_eq!((b.len(), b.d_embed()), (16, 32));
        assert!(b.rows.iter().all(|r| (dot(r, r).sqrt() - 1.0).abs() < 1e-6));
        let again = build_class_bank(&captions, &model.tokenizer, &model.text_tower).unwrap();
        assert_eq!(b.digest(), again.digest());
        assert!(matches!(
            build_class_bank_for(&[0, 99], &captions, &model.tokenizer, &model.text_tower),
            Err(EvalError::MissingCaption(99))
        ));
    }

    #[test]
    fn colliding_captions_share_a_row() {
        use crate::caption::{generate_caption_set, CaptionTemplate};
        use crate::metadata::MetadataTable;

        let table = MetadataTable::parse_csv(b"class_id,name\n0,Moss\n1,Fern\n2,Moss\n").unwrap();
        let captions = generate_caption_set(&table, &CaptionTemplate::default(), 1).unwrap();
        let tok = Tokenizer::build(&captions, 64);
        let tower = TextTower::init(tok.vocab_size(), 8, 8, 0);
        let b = build_class_bank(&captions, &tok, &tower).unwrap();
        assert_eq!(b.rows[0], b.rows[2]);
        assert_eq!(b.collisions, vec![vec![0, 2]]);
    }
}
