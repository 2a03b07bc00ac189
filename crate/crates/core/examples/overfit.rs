//! Trains on a small synthetic corpus and decodes it back.
//!
//! `cargo run --release --example overfit -- [ctc_collapse|conv5x5] [steps] [full|lora] [pretrain_steps]`

use std::time::Instant;

use anyhow::Result;
use stllm::data::{synth_dataset, SyntheticSpec};
use stllm::evalkit::{score_asr, score_st, BleuMode};
use stllm::microlm::LoraConfig;
use stllm::pipeline::{run_inference, run_training, AdapterKind, PipelineConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let adapter = match args.first().map(String::as_str) {
        Some("conv5x5") => AdapterKind::Conv5x5,
        _ => AdapterKind::CtcCollapse,
    };
    let steps: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let lora = args.get(2).is_some_and(|s| s == "lora");
    let pretrain: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);

    let dir = tempfile::tempdir()?;
    let manifest = synth_dataset(&SyntheticSpec::default(), dir.path())?;
    let mut cfg = PipelineConfig {
        adapter,
        ..PipelineConfig::default()
    };
    cfg.train.total_steps = steps;
    cfg.pretrain.steps = pretrain;
    if lora {
        cfg.lora = Some(LoraConfig::default());
    }

    let t0 = Instant::now();
    let out = run_training(&cfg, &manifest, |step, loss| {
        if step % 250 == 0 {
            println!("step {step:5}  loss {loss:.4}");
        }
    })?;
    println!(
        "trained {steps} steps in {:.1?}; final loss {:.5}",
        t0.elapsed(),
        out.final_loss
    );

    let decoded = run_inference(&out.model, &manifest);
    let refs_tr: Vec<String> = manifest
        .records()
        .iter()
        .map(|r| r.transcript.clone())
        .collect();
    let refs_tl: Vec<String> = manifest
        .records()
        .iter()
        .filter_map(|r| r.translation.clone())
        .collect();
    let hyp_tr: Vec<String> = decoded.iter().map(|d| d.transcript().to_string()).collect();
    let hyp_tl: Vec<String> = decoded
        .iter()
        .map(|d| d.translation().to_string())
        .collect();
    let exact = |h: &[String], r: &[String]| {
        h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / r.len() as f64
    };
    println!("transcript exact match  {:.3}", exact(&hyp_tr, &refs_tr));
    println!("translation exact match {:.3}", exact(&hyp_tl, &refs_tl));
    println!(
        "WER                     {:.4}",
        score_asr(&hyp_tr, &refs_tr)?.wer()
    );
    println!(
        "BLEU (reseg)            {:.2}",
        score_st(&hyp_tl, &refs_tl, BleuMode::Resegmented)?.score
    );
    Ok(())
}
