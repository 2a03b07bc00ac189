//! Short training run, checkpoint round trip, inference from the reloaded model.
//!
//! `cargo run --release --example checkpoint`

use anyhow::Result;
use stllm::data::{synth_dataset, SyntheticSpec};
use stllm::pipeline::{run_inference, run_training, PipelineConfig, SpeechLm};

const CONFIG: &str = r#"
adapter = "conv5x5"
[model]
d_model = 32
n_heads = 2
d_ff = 64
[train]
peak_lr = 1e-3
total_steps = 300
"#;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let manifest = synth_dataset(
        &SyntheticSpec {
            n_samples: 8,
            vocab_size: 8,
            ..SyntheticSpec::default()
        },
        dir.path(),
    )?;
    let cfg = PipelineConfig::from_toml(CONFIG)?;
    let out = run_training(&cfg, &manifest, |_, _| {})?;
    println!("loss {:.3} -> {:.3}", out.curve.points[0].1, out.final_loss);

    let path = dir.path().join("model.ck");
    out.model.save(Some(&out.adam), &path)?;
    let (reloaded, adam) = SpeechLm::load(&path)?;
    println!(
        "checkpoint {} bytes, {} tensors, optimizer at step {}",
        std::fs::metadata(&path)?.len(),
        reloaded.tensors().len(),
        adam.step
    );

    let before = run_inference(&out.model, &manifest);
    let after = run_inference(&reloaded, &manifest);
    assert_eq!(before, after);
    for r in after.iter().take(3) {
        println!("{}: {:?} | {:?}", r.id, r.transcript(), r.translation());
    }
    Ok(())
}
