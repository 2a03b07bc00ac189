//! Low-rank adaptation on top of a text-pretrained base model, compared with
//! full fine-tuning from the same starting point.
//!
//! `cargo run --release --example lora -- [steps]`

use anyhow::Result;
use stllm::data::{synth_dataset, SyntheticSpec};
use stllm::microlm::{LoraConfig, LoraTarget};
use stllm::pipeline::{run_training, PipelineConfig};

fn main() -> Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(1500);
    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec {
        vocab_size: 12,
        ..SyntheticSpec::default()
    };
    let manifest = synth_dataset(&spec, dir.path())?;

    let mut base = PipelineConfig::default();
    base.train.total_steps = steps;
    base.pretrain.steps = 1000;

    for (name, lora) in [
        ("full", None),
        ("lora r=8 all", Some(LoraConfig::default())),
        (
            "lora r=8 attention",
            Some(LoraConfig {
                targets: vec![
                    LoraTarget::Query,
                    LoraTarget::Key,
                    LoraTarget::Value,
                    LoraTarget::Output,
                ],
                ..LoraConfig::default()
            }),
        ),
    ] {
        let cfg = PipelineConfig {
            lora,
            ..base.clone()
        };
        let out = run_training(&cfg, &manifest, |_, _| {})?;
        let trainable: usize = out
            .model
            .tensors()
            .iter()
            .filter(|(n, _, _)| {
                let lm = n.starts_with("lm.");
                if cfg.lora.is_some() {
                    !lm
                } else {
                    !n.starts_with("lora.")
                }
            })
            .map(|(_, _, v)| v.len())
            .sum();
        println!(
            "{name:<20} trainable {trainable:>7}  final loss {:.5}",
            out.final_loss
        );
    }
    Ok(())
}
