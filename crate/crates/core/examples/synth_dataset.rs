//! Generates a synthetic speech-translation corpus and inspects it.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use anyhow::{Context, Result};
use stllm::data::{read_features, read_manifest, synth_dataset, SyntheticSpec};

fn main() -> Result<()> {
    let out = std::env::args().nth(1);
    let tmp = tempfile::tempdir()?;
    let dir = out
        .map(Into::into)
        .unwrap_or_else(|| tmp.path().to_path_buf());

    let spec = SyntheticSpec {
        n_samples: 8,
        ..SyntheticSpec::default()
    };
    let manifest = synth_dataset(&spec, &dir)?;
    println!("{} records in {}", manifest.len(), dir.display());

    // the manifest on disk parses back to the same records
    let reread = read_manifest(dir.join("manifest.jsonl"))?;
    assert_eq!(reread.records(), manifest.records());

    for r in manifest.records().iter().take(4) {
        let seq = read_features(manifest.features_path(r)).context("feature file")?;
        let labels = r.labels.as_deref().unwrap_or_default();
        println!(
            "{:>6}  T={:<3} d={}  {:<24} -> {:<24} labels {:?}",
            r.id,
            seq.frames(),
            seq.dim(),
            r.transcript,
            r.translation.as_deref().unwrap_or("-"),
            labels
        );
    }
    Ok(())
}
