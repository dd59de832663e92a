//! Synthetic stand-in dataset: an invented taxonomy plus noisy copies of a
//! random per-class prototype image.
//!
//! Each class draws from its own ChaCha8 stream keyed by `(seed, class_id)`,
//! so a class's names and pixels do not depend on how many other classes
//! exist or in which order they are generated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::caption::CaptionSet;
use crate::metadata::{MetadataError, MetadataTable};
use crate::pgm::encode_pgm;
use crate::shard::Sample;

pub const SUPERCATEGORIES: [&str; 4] = ["Birds", "Insects", "Fungi", "Plants"];
pub const COLUMNS: [&str; 4] = ["common_name", "supercategory", "binomial", "description"];
pub const TRAIN_SPLIT: &str = "train";
pub const HOLDOUT_SPLIT: &str = "holdout";

const ADJECTIVES: [&str; 24] = [
    "Pale", "Spotted", "Crested", "Lesser", "Greater", "Ringed", "Golden", "Dusky", "Banded",
    "Scarlet", "Hooded", "Tufted", "Marbled", "Velvet", "Copper", "Silver", "Striped", "Mottled",
    "Ashy", "Painted", "Rusty", "Frosted", "Olive", "Ivory",
];
const NOUNS: [&str; 24] = [
    "Warbler", "Moth", "Bracket", "Fern", "Sparrow", "Beetle", "Puffball", "Sedge", "Finch",
    "Skipper", "Morel", "Rush", "Wren", "Lacewing", "Truffle", "Aster", "Plover", "Hawker",
    "Inkcap", "Orchid", "Thrush", "Weevil", "Chanterelle", "Clover",
];
const SIZES: [&str; 4] = ["small", "medium-sized", "large", "tiny"];
const COLOURS: [&str; 6] = ["brown", "grey", "yellow", "green", "reddish", "black"];
const HABITATS: [&str; 6] = [
    "coastal marshes", "montane forests", "dry grasslands", "river valleys", "urban parks",
    "boreal bogs",
];
const CONSONANTS: &[u8; 16] = b"bcdfghklmnprstvz";
const VOWELS: &[u8; 4] = b"aeio";
const GENUS_ENDINGS: [&str; 4] = ["us", "ia", "is", "on"];
const EPITHET_ENDINGS: [&str; 4] = ["a", "ensis", "um", "ii"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("table has {found} classes, spec declares {expected}")]
    ClassCount { expected: usize, found: usize },
    #[error("no caption for class {0}")]
    MissingCaption(u64),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            images_per_class: 50,
            image_side: 16,
            noise_sigma: 8.0,
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be at least 1");
        }
        if self.holdout_fraction > 0.0 && self.images_per_class < 2 {
            return bad("images_per_class must be at least 2 when holding out");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        if self.image_side == 0 {
            return bad("image_side must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Held-out images per class.
    pub fn holdout_per_class(&self) -> usize {
        if self.holdout_fraction <= 0.0 {
            return 0;
        }
        let n = (self.images_per_class as f64 * self.holdout_fraction).round() as usize;
        n.clamp(1, self.images_per_class - 1)
    }

    fn class_rng(&self, class_id: u64, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(class_id.wrapping_mul(4).wrapping_add(purpose));
        rng
    }
}

const NAME_STREAM: u64 = 0;
const PROTOTYPE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn syllable<R: Rng>(rng: &mut R) -> String {
    let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
    let v = VOWELS[rng.random_range(0..VOWELS.len())] as char;
    format!("{c}{v}")
}

/// Base-16 numeral spelled in consonant-vowel syllables. Distinct numbers
/// give distinct spellings, which makes epithets unique per class.
fn numeral(mut n: u64) -> String {
    let mut digits = Vec::new();
    loop {
        digits.push((n % 16) as usize);
        n /= 16;
        if n == 0 {
            break;
        }
    }
    digits
        .iter()
        .rev()
        .map(|&d| format!("{}{}", CONSONANTS[d] as char, VOWELS[d % VOWELS.len()] as char))
        .collect()
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    chars
        .next()
        .map(|c| c.to_uppercase().chain(chars).collect())
        .unwrap_or_default()
}

/// Builds the synthetic metadata table: common name, supercategory (from a
/// pool of four), unique binomial, and a short description.
pub fn generate_taxonomy(spec: &SynthSpec) -> Result<MetadataTable> {
    spec.validate()?;
    let offset = (spec.seed % SUPERCATEGORIES.len() as u64) as usize;
    let rows = (0..spec.num_classes as u64)
        .map(|class_id| {
            let mut rng = spec.class_rng(class_id, NAME_STREAM);
            let common = format!("{} {}", pick(&mut rng, &ADJECTIVES), pick(&mut rng, &NOUNS));
            let supercategory =
                SUPERCATEGORIES[(class_id as usize + offset) % SUPERCATEGORIES.len()];
            let genus_len = rng.random_range(1..=2);
            let genus: String = (0..genus_len).map(|_| syllable(&mut rng)).collect();
            let genus = capitalize(&format!("{genus}{}", pick(&mut rng, &GENUS_ENDINGS)));
            let epithet = format!(
                "{}{}{}",
                syllable(&mut rng),
                numeral(class_id),
                pick(&mut rng, &EPITHET_ENDINGS)
            );
            let description = format!(
                "A {} {} species of {}",
                pick(&mut rng, &SIZES),
                pick(&mut rng, &COLOURS),
                pick(&mut rng, &HABITATS)
            );
            let values = vec![
                Some(common),
                Some(supercategory.to_string()),
                Some(format!("{genus} {epithet}")),
                Some(description),
            ];
            (class_id, values)
        })
        .collect();
    Ok(MetadataTable::from_rows(
        COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    )?)
}

/// The prototype pixel grid of every class, in table order.
pub fn prototypes(spec: &SynthSpec, table: &MetadataTable) -> Vec<Vec<u8>> {
    let pixels = spec.image_side * spec.image_side;
    table
        .class_ids()
        .map(|id| {
            let mut rng = spec.class_rng(id, PROTOTYPE_STREAM);
            (0..pixels).map(|_| rng.random::<u8>()).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub holdout: Vec<Sample>,
}

/// Sample metadata: `{class_id, columns, split}`.
pub fn sample_meta(record: &crate::metadata::ClassRecord, split: &str) -> Value {
    let columns: Map<String, Value> = record
        .columns
        .iter()
        .map(|(name, value)| (name.clone(), value.clone().map_or(Value::Null, Value::String)))
        .collect();
    json!({"class_id": record.class_id, "columns": columns, "split": split})
}

/// Renders `images_per_class` noisy PGM samples per class and splits them,
/// holding out the last [`SynthSpec::holdout_per_class`] images of each class.
pub fn generate_images(spec: &SynthSpec, table: &MetadataTable, captions: &CaptionSet) -> Result<Splits> {
    spec.validate()?;
    if table.len() != spec.num_classes {
        return Err(SynthError::ClassCount {
            expected: spec.num_classes,
            found: table.len(),
        });
    }
    let side = spec.image_side;
    let holdout = spec.holdout_per_class();
    let mut splits = Splits {
        train: Vec::new(),
        holdout: Vec::new(),
    };
    for (class_index, (record, prototype)) in table
        .records()
        .iter()
        .zip(prototypes(spec, table))
        .enumerate()
    {
        let caption = captions
            .get(record.class_id)
            .ok_or(SynthError::MissingCaption(record.class_id))?;
        let mut rng = spec.class_rng(record.class_id, NOISE_STREAM);
        for image_index in 0..spec.images_per_class {
            let pixels: Vec<u8> = prototype
                .iter()
                .map(|&p| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (f64::from(p) + spec.noise_sigma * noise).round().clamp(0.0, 255.0) as u8
                })
                .collect();
            let is_holdout = image_index >= spec.images_per_class - holdout;
            let split = if is_holdout { HOLDOUT_SPLIT } else { TRAIN_SPLIT };
            let sample = Sample {
                key: Sample::key_for((class_index * spec.images_per_class + image_index) as u64),
                image_bytes: encode_pgm(side, side, &pixels),
                caption: caption.to_string(),
                meta: sample_meta(record, split),
            };
            if is_holdout {
                splits.holdout.push(sample);
            } else {
                splits.train.push(sample);
            }
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::{distinctness_score, generate_caption_set_with, CaptionOptions};
    use crate::pgm::decode_pnm;
    use std::collections::{BTreeMap, HashSet};

    fn dataset(spec: &SynthSpec) -> (MetadataTable, CaptionSet, Splits) {
        let table = generate_taxonomy(spec).unwrap();
        let captions = generate_caption_set_with(&table, &CaptionOptions::default()).unwrap();
        let splits = generate_images(spec, &table, &captions).unwrap();
        (table, captions, splits)
    }

    #[test]
    fn supercategory_bounded_by_pool() {
        let table = generate_taxonomy(&SynthSpec::default()).unwrap();
        assert_eq!(distinctness_score(&table, &["supercategory"]).unwrap(), 4);
        assert_eq!(distinctness_score(&table, &["binomial"]).unwrap(), 16);
    }

    #[test]
    fn binomials_unique_at_scale() {
        let spec = SynthSpec {
            num_classes: 1000,
            ..SynthSpec::default()
        };
        let table = generate_taxonomy(&spec).unwrap();
        assert_eq!(distinctness_score(&table, &["binomial"]).unwrap(), 1000);
    }

    #[test]
    fn taxonomy_deterministic_and_validated() {
        let spec = SynthSpec::default();
        assert_eq!(generate_taxonomy(&spec).unwrap(), generate_taxonomy(&spec).unwrap());
        let one = SynthSpec {
            num_classes: 1,
            ..spec.clone()
        };
        assert!(matches!(generate_taxonomy(&one), Err(SynthError::InvalidSpec(_))));
        let other = SynthSpec { seed: 7, ..spec };
        assert_ne!(
            generate_taxonomy(&other).unwrap().canonical_digest(),
            generate_taxonomy(&SynthSpec::default()).unwrap().canonical_digest()
        );
    }

    #[test]
    fn zero_noise_reproduces_prototype() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            images_per_class: 4,
            num_classes: 3,
            ..SynthSpec::default()
        };
        let (table, _, splits) = dataset(&spec);
        let protos = prototypes(&spec, &table);
        for sample in splits.train.iter().chain(&splits.holdout) {
            let class = sample.class_id().unwrap() as usize;
            assert_eq!(decode_pnm(&sample.image_bytes).unwrap().pixels, protos[class]);
        }
    }

    #[test]
    fn stratified_split_sizes() {
        let spec = SynthSpec::default();
        let (_, _, splits) = dataset(&spec);
        assert_eq!((splits.train.len(), splits.holdout.len()), (640, 160));
        let mut per_class: BTreeMap<(u64, &str), usize> = BTreeMap::new();
        for s in splits.train.iter().chain(&splits.holdout) {
            *per_class.entry((s.class_id().unwrap(), s.split().unwrap())).or_default() += 1;
        }
        for class in 0..16 {
            assert_eq!(per_class[&(class, TRAIN_SPLIT)], 40);
            assert_eq!(per_class[&(class, HOLDOUT_SPLIT)], 10);
        }
        let keys: HashSet<_> = splits.train.iter().chain(&splits.holdout).map(|s| &s.key).collect();
        assert_eq!(keys.len(), 800);
    }

    #[test]
    fn every_class_in_both_splits_when_small() {
        let spec = SynthSpec {
            images_per_class: 2,
            holdout_fraction: 0.01,
            ..SynthSpec::default()
        };
        let (_, _, splits) = dataset(&spec);
        assert_eq!(splits.train.len(), 16);
        assert_eq!(splits.holdout.len(), 16);
    }

    #[test]
    fn prototypes_well_separated() {
        let spec = SynthSpec::default();
        let table = generate_taxonomy(&spec).unwrap();
        let protos = prototypes(&spec, &table);
        let bound = 4.0 * spec.noise_sigma * spec.noise_sigma;
        for (i, a) in protos.iter().enumerate() {
            for b in &protos[i + 1..] {
                let msd = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                    .sum::<f64>()
                    / a.len() as f64;
                assert!(msd > bound, "msd {msd} <= {bound}");
            }
        }
    }

    #[test]
    fn images_deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(dataset(&spec).2, dataset(&spec).2);
    }

    #[test]
    fn numerals_are_distinct() {
        let all: HashSet<String> = (0..5000).map(numeral).collect();
        assert_eq!(all.len(), 5000);
    }

    #[test]
    fn frozen_projection_separates_classes() {
        use crate::trainer::tower::dot;
        use crate::trainer::{sample_pixels, ImageTower};

        let spec = SynthSpec::default();
        let (_, _, splits) = dataset(&spec);
        let tower = ImageTower::init(spec.image_side * spec.image_side, 32, 0);
        let mut by_class: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
        for s in &splits.train {
            let emb = tower.encode(&sample_pixels(s).unwrap()).unwrap();
            by_class.entry(s.class_id().unwrap()).or_default().push(emb);
        }
        let means: BTreeMap<u64, Vec<f64>> = by_class
            .iter()
            .map(|(&id, embs)| {
                let mut m = vec![0.0; 32];
                for e in embs {
                    m.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                }
                let norm = dot(&m, &m).sqrt();
                (id, m.into_iter().map(|x| x / norm).collect())
            })
            .collect();
        let mut nearest_own = 0;
        for (id, embs) in &by_class {
            for e in embs {
                let best = means
                    .iter()
                    .max_by(|a, b| dot(e, a.1).total_cmp(&dot(e, b.1)))
                    .map(|(&c, _)| c)
                    .unwrap();
                nearest_own += usize::from(best == *id);
            }
        }
        let frac = nearest_own as f64 / splits.train.len() as f64;
        assert!(frac >= 0.99, "{frac}");
    }
}
