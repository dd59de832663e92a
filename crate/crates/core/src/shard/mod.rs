//! Webdataset-style shards: every sample is three consecutive ustar members
//! sharing a key basename (`<key>.<img>`, `<key>.txt`, `<key>.json`), and a
//! JSON manifest records the count, size and SHA-256 of every shard.

pub mod ustar;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;
use ustar::UstarError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const KEY_DIGITS: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{shard}: {source}")]
    Ustar {
        shard: String,
        #[source]
        source: UstarError,
    },
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("duplicate sample key {0}")]
    DuplicateKey(String),
    #[error("sample {key}: {reason}")]
    InvalidSample { key: String, reason: String },
    #[error("invalid shard name pattern {0:?}: needs exactly one %d or %0Nd placeholder")]
    InvalidPattern(String),
    #[error("samples_per_shard must be at least 1")]
    ZeroShardSize,
    #[error("{shard}: sample {key} is missing member(s) {missing:?}")]
    Orphan {
        shard: String,
        key: String,
        missing: Vec<String>,
    },
    #[error("{shard}: bad member {name:?}: {reason}")]
    BadMember {
        shard: String,
        name: String,
        reason: String,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("batch_size must be at least 1")]
    ZeroBatchSize,
}

pub type Result<T> = std::result::Result<T, ShardError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ShardError + '_ {
    move |source| ShardError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub key: String,
    pub image_bytes: Vec<u8>,
    pub caption: String,
    pub meta: Value,
}

impl Sample {
    /// The zero-padded key for a dataset-wide sample index.
    pub fn key_for(index: u64) -> String {
        format!("{index:0KEY_DIGITS$}")
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| ShardError::InvalidSample {
            key: self.key.clone(),
            reason: reason.to_string(),
        };
        if self.key.len() != KEY_DIGITS || !self.key.bytes().all(|b| b.is_ascii_digit()) {
            return Err(invalid("key must be nine decimal digits"));
        }
        if self.image_bytes.is_empty() {
            return Err(invalid("empty image"));
        }
        if self.caption.is_empty() {
            return Err(invalid("empty caption"));
        }
        Ok(())
    }

    pub fn class_id(&self) -> Option<u64> {
        self.meta.get("class_id").and_then(Value::as_u64)
    }

    pub fn split(&self) -> Option<&str> {
        self.meta.get("split").and_then(Value::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShardSpec {
    pub samples_per_shard: usize,
    pub name_pattern: String,
    pub shuffle_seed: Option<u64>,
    pub image_extension: String,
}

impl Default for ShardSpec {
    fn default() -> Self {
        Self {
            samples_per_shard: 256,
            name_pattern: "shard-%06d.tar".into(),
            shuffle_seed: None,
            image_extension: "ppm".into(),
        }
    }
}

/// A parsed `name_pattern`: literal text around one integer placeholder.
struct NamePattern<'a> {
    head: &'a str,
    width: usize,
    tail: &'a str,
}

impl<'a> NamePattern<'a> {
    fn parse(pattern: &'a str) -> Result<Self> {
        let bad = || ShardError::InvalidPattern(pattern.to_string());
        if pattern.matches('%').count() != 1 {
            return Err(bad());
        }
        let start = pattern.find('%').ok_or_else(bad)?;
        let rest = &pattern[start + 1..];
        let d = rest.find('d').ok_or_else(bad)?;
        let width_text = &rest[..d];
        if !width_text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let width = if width_text.is_empty() {
            0
        } else if width_text.starts_with('0') {
            width_text.parse().map_err(|_| bad())?
        } else {
            return Err(bad());
        };
        let tail = &rest[d + 1..];
        if tail.contains('/') || pattern[..start].contains('/') {
            return Err(bad());
        }
        Ok(Self {
            head: &pattern[..start],
            width,
            tail,
        })
    }

    fn name(&self, index: usize) -> String {
        format!("{}{:0width$}{}", self.head, index, self.tail, width = self.width)
    }
}

impl ShardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_shard == 0 {
            return Err(ShardError::ZeroShardSize);
        }
        NamePattern::parse(&self.name_pattern)?;
        if self.image_extension.is_empty()
            || self.image_extension.contains(['.', '/'])
            || matches!(self.image_extension.as_str(), "txt" | "json")
        {
            return Err(ShardError::InvalidSample {
                key: String::new(),
                reason: format!("bad image extension {:?}", self.image_extension),
            });
        }
        Ok(())
    }

    pub fn shard_name(&self, index: usize) -> Result<String> {
        Ok(NamePattern::parse(&self.name_pattern)?.name(index))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub count: usize,
    pub bytes: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardManifest {
    pub shards: Vec<ShardEntry>,
    pub total_samples: usize,
    pub spec: ShardSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ShardManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let mut manifest: ShardManifest = serde_json::from_slice(&bytes)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn shard_path(&self, entry: &ShardEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Digest over the manifest document itself.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_json_bytes())
    }
}

/// In-place Fisher–Yates shuffle driven by a seeded ChaCha8 stream.
pub fn seeded_permutation<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Encodes one shard's samples as a complete ustar archive.
pub fn encode_shard(samples: &[&Sample], image_extension: &str) -> std::result::Result<Vec<u8>, UstarError> {
    let mut out = Vec::new();
    for sample in samples {
        let meta = serde_json::to_vec(&sample.meta).expect("JSON value serializes");
        ustar::append(&mut out, &format!("{}.{image_extension}", sample.key), &sample.image_bytes)?;
        ustar::append(&mut out, &format!("{}.txt", sample.key), sample.caption.as_bytes())?;
        ustar::append(&mut out, &format!("{}.json", sample.key), &meta)?;
    }
    ustar::finish(&mut out);
    Ok(out)
}

/// Packs samples into shards under `out_dir` and writes `manifest.json`.
///
/// Samples are ordered by key (or by a seeded permutation of that order) and
/// cut into consecutive shards of `samples_per_shard`. Shards are encoded by
/// up to [`crate::worker_threads`] workers; output does not depend on the
/// worker count.
pub fn write_shards(samples: &[Sample], spec: &ShardSpec, out_dir: &Path) -> Result<ShardManifest> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(ShardError::EmptyDataset);
    }
    let mut seen = HashSet::new();
    for sample in samples {
        sample.validate()?;
        if !seen.insert(sample.key.as_str()) {
            return Err(ShardError::DuplicateKey(sample.key.clone()));
        }
    }
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.key.cmp(&b.key));
    if let Some(seed) = spec.shuffle_seed {
        seeded_permutation(&mut ordered, seed);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let chunks: Vec<&[&Sample]> = ordered.chunks(spec.samples_per_shard).collect();
    let names = (0..chunks.len())
        .map(|i| spec.shard_name(i))
        .collect::<Result<Vec<_>>>()?;
    let workers = crate::worker_threads().min(chunks.len()).max(1);
    let encoded: Vec<std::result::Result<Vec<u8>, UstarError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                scope.spawn(move || {
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|i| (i, encode_shard(chunks[i], &spec.image_extension)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut slots: Vec<Option<_>> = (0..chunks.len()).map(|_| None).collect();
        for handle in handles {
            for (i, bytes) in handle.join().expect("shard worker panicked") {
                slots[i] = Some(bytes);
            }
        }
        slots.into_iter().map(|s| s.expect("every shard encoded")).collect()
    });

    let mut shards = Vec::with_capacity(chunks.len());
    for ((name, chunk), bytes) in names.into_iter().zip(&chunks).zip(encoded) {
        let bytes = bytes.map_err(|source| ShardError::Ustar {
            shard: name.clone(),
            source,
        })?;
        let path = out_dir.join(&name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        shards.push(ShardEntry {
            path: name,
            count: chunk.len(),
            bytes: bytes.len() as u64,
            digest: sha256_hex(&bytes),
        });
    }
    let manifest = ShardManifest {
        total_samples: shards.iter().map(|s| s.count).sum(),
        shards,
        spec: spec.clone(),
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_json_bytes()).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

#[derive(Default)]
struct Group {
    key: String,
    image: Option<Vec<u8>>,
    caption: Option<Vec<u8>>,
    meta: Option<Vec<u8>>,
}

impl Group {
    fn finish(self, shard: &str) -> Result<Sample> {
        let missing: Vec<String> = [
            (self.image.is_none(), "image"),
            (self.caption.is_none(), "txt"),
            (self.meta.is_none(), "json"),
        ]
        .into_iter()
        .filter(|(absent, _)| *absent)
        .map(|(_, ext)| ext.to_string())
        .collect();
        if !missing.is_empty() {
            return Err(ShardError::Orphan {
                shard: shard.to_string(),
                key: self.key,
                missing,
            });
        }
        let bad = |name: String, reason: String| ShardError::BadMember {
            shard: shard.to_string(),
            name,
            reason,
        };
        let caption = String::from_utf8(self.caption.expect("checked"))
            .map_err(|e| bad(format!("{}.txt", self.key), e.to_string()))?;
        let meta = serde_json::from_slice(&self.meta.expect("checked"))
            .map_err(|e| bad(format!("{}.json", self.key), e.to_string()))?;
        let sample = Sample {
            key: self.key,
            image_bytes: self.image.expect("checked"),
            caption,
            meta,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Decodes one shard archive. `shard` names it in errors.
pub fn decode_shard(bytes: &[u8], shard: &str) -> Result<Vec<Sample>> {
    let members = ustar::read_members(bytes).map_err(|source| ShardError::Ustar {
        shard: shard.to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut finished = HashSet::new();
    let mut group: Option<Group> = None;
    for member in members {
        let Some((key, ext)) = member.name.split_once('.') else {
            return Err(ShardError::BadMember {
                shard: shard.to_string(),
                name: member.name,
                reason: "no extension".into(),
            });
        };
        if group.as_ref().is_some_and(|g| g.key != key) {
            let done = group.take().expect("checked");
            finished.insert(done.key.clone());
            samples.push(done.finish(shard)?);
        }
        if finished.contains(key) {
            return Err(ShardError::DuplicateKey(key.to_string()));
        }
        let current = group.get_or_insert_with(|| Group {
            key: key.to_string(),
            ..Group::default()
        });
        let slot = match ext {
            "txt" => &mut current.caption,
            "json" => &mut current.meta,
            _ => &mut current.image,
        };
        if slot.replace(member.data).is_some() {
            return Err(ShardError::BadMember {
                shard: shard.to_string(),
                name: member.name,
                reason: "repeated member for key".into(),
            });
        }
    }
    if let Some(last) = group {
        samples.push(last.finish(shard)?);
    }
    Ok(samples)
}

fn read_shard_file(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_shard(&bytes, &path.display().to_string())
}

/// Reads samples back from a manifest file, a single `.tar` shard, or a
/// directory (its manifest if present, otherwise every `*.tar` by name).
pub fn read_shards(path: &Path) -> Result<Vec<Sample>> {
    if path.is_dir() {
        let manifest_path = path.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return read_manifest_samples(&ShardManifest::load(&manifest_path)?);
        }
        let mut tars: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tar"))
            .collect();
        tars.sort();
        let mut samples = Vec::new();
        for tar in tars {
            samples.extend(read_shard_file(&tar)?);
        }
        return Ok(samples);
    }
    if path.extension().is_some_and(|e| e == "json") {
        return read_manifest_samples(&ShardManifest::load(path)?);
    }
    read_shard_file(path)
}

pub fn read_manifest_samples(manifest: &ShardManifest) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(manifest.total_samples);
    for entry in &manifest.shards {
        samples.extend(read_shard_file(&manifest.shard_path(entry))?);
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShardFinding {
    MissingFile,
    SizeMismatch { expected: u64, actual: u64 },
    DigestMismatch { expected: String, actual: String },
    CountMismatch { expected: usize, actual: usize },
    Unreadable { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardCheck {
    pub path: String,
    pub findings: Vec<ShardFinding>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub shards: Vec<ShardCheck>,
    pub declared_total: usize,
    pub counted_total: usize,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.declared_total == self.counted_total && self.shards.iter().all(|s| s.findings.is_empty())
    }
}

/// Recomputes sizes, digests and sample counts of every listed shard.
pub fn verify_manifest(manifest: &ShardManifest) -> VerificationReport {
    let mut shards = Vec::with_capacity(manifest.shards.len());
    let mut counted_total = 0;
    for entry in &manifest.shards {
        let mut findings = Vec::new();
        match fs::read(manifest.shard_path(entry)) {
            Err(_) => findings.push(ShardFinding::MissingFile),
            Ok(bytes) => {
                if bytes.len() as u64 != entry.bytes {
                    findings.push(ShardFinding::SizeMismatch {
                        expected: entry.bytes,
                        actual: bytes.len() as u64,
                    });
                }
                let actual = sha256_hex(&bytes);
                if actual != entry.digest {
                    findings.push(ShardFinding::DigestMismatch {
                        expected: entry.digest.clone(),
                        actual,
                    });
                }
                match decode_shard(&bytes, &entry.path) {
                    Ok(samples) => {
                        counted_total += samples.len();
                        if samples.len() != entry.count {
                            findings.push(ShardFinding::CountMismatch {
                                expected: entry.count,
                                actual: samples.len(),
                            });
                        }
                    }
                    Err(e) => findings.push(ShardFinding::Unreadable {
                        reason: e.to_string(),
                    }),
                }
            }
        }
        shards.push(ShardCheck {
            path: entry.path.clone(),
            findings,
        });
    }
    VerificationReport {
        shards,
        declared_total: manifest.total_samples,
        counted_total,
    }
}

/// Positions (into a key-sorted sample list of length `len`) grouped into
/// full batches for one epoch. The trailing short batch is dropped.
pub fn epoch_batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(ShardError::ZeroBatchSize);
    }
    let mut order: Vec<usize> = (0..len).collect();
    seeded_permutation(&mut order, epoch_seed);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One epoch of full batches drawn from a sample set.
pub struct BatchStream {
    samples: Vec<Sample>,
    batches: std::vec::IntoIter<Vec<usize>>,
    dropped: usize,
}

impl BatchStream {
    pub fn new(mut samples: Vec<Sample>, batch_size: usize, epoch_seed: u64) -> Result<Self> {
        samples.sort_by(|a, b| a.key.cmp(&b.key));
        let batches = epoch_batches(samples.len(), batch_size, epoch_seed)?;
        let dropped = samples.len() - batches.len() * batch_size;
        Ok(Self {
            samples,
            batches: batches.into_iter(),
            dropped,
        })
    }

    /// Samples left out of this epoch by the short-batch rule.
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl Iterator for BatchStream {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.batches.next()?;
        Some(batch.into_iter().map(|i| self.samples[i].clone()).collect())
    }
}

pub fn stream_batches(manifest: &ShardManifest, batch_size: usize, epoch_seed: u64) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(ShardError::ZeroBatchSize);
    }
    BatchStream::new(read_manifest_samples(manifest)?, batch_size, epoch_seed)
}
