// Write a small labelled dataset as ustar shards, read it back, verify the
// manifest, then flip one byte on disk and watch verification catch it.
//
//     cargo run --example shard_roundtrip

use litforge::pgm::encode_pgm;
use litforge::shard::{read_shards, stream_batches, verify_manifest, write_shards, Sample, ShardManifest, ShardSpec};
use serde_json::json;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let samples: Vec<Sample> = (0..50u64)
        .map(|i| Sample {
            key: Sample::key_for(i),
            image_bytes: encode_pgm(4, 4, &[(i * 5) as u8; 16]),
            caption: format!("A photo of the species {}", i % 5),
            meta: json!({"class_id": i % 5, "split": "train"}),
        })
        .collect();

    let spec = ShardSpec {
        samples_per_shard: 16,
        shuffle_seed: Some(7),
        ..ShardSpec::default()
    };
    let manifest = write_shards(&samples, &spec, dir.path())?;
    for entry in &manifest.shards {
        println!("{}  {:>2} samples  sha256 {}", entry.path, entry.count, &entry.digest[..16]);
    }

    let mut back = read_shards(dir.path())?;
    back.sort_by(|a, b| a.key.cmp(&b.key));
    println!("read back {} samples, identical: {}", back.len(), back == samples);

    let mut stream = stream_batches(&manifest, 8, 0)?;
    let first = stream.next().expect("at least one batch");
    println!(
        "epoch 0 starts with keys {:?}; {} samples dropped per epoch",
        first.iter().map(|s| s.key.as_str()).collect::<Vec<_>>(),
        stream.dropped()
    );

    println!("clean verification passed: {}", verify_manifest(&manifest).passed());
    let victim = manifest.shard_path(&manifest.shards[1]);
    let mut bytes = std::fs::read(&victim)?;
    bytes[600] ^= 0xff;
    std::fs::write(&victim, bytes)?;
    let reloaded = ShardManifest::load(&dir.path().join(litforge::shard::MANIFEST_FILE))?;
    let report = verify_manifest(&reloaded);
    println!("after corrupting {}: passed = {}", manifest.shards[1].path, report.passed());
    for check in report.shards.iter().filter(|c| !c.findings.is_empty()) {
        println!("  {:?}", check.findings);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
