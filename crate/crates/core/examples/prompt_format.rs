//! Training layout, loss mask and inference prompt for one sample.
//!
//! `cargo run --example prompt_format`

use anyhow::Result;
use stllm::promptfmt::{
    assemble_inference_prompt, assemble_training_sample, split_output, Slot, Vocabulary,
};
use stllm::tensor::Matrix;

fn main() -> Result<()> {
    let vocab = Vocabulary::build(["guten morgen", "good morning"]);
    let audio = Matrix::zeros(3, 8);
    let tr = vocab.encode("guten morgen")?;
    let tl = vocab.encode("good morning")?;
    let sample = assemble_training_sample(&audio, &tr, &tl, &vocab)?;

    println!("{:>3}  {:<16} {:<16} loss", "pos", "input", "target");
    for (i, slot) in sample.prompt.slots.iter().enumerate() {
        let input = match *slot {
            Slot::Token(id) => vocab.token(id).unwrap_or("?").to_string(),
            Slot::Audio(t) => format!("[audio {t}]"),
        };
        let target = if sample.loss_mask[i] {
            vocab.token(sample.target_ids[i]).unwrap_or("?")
        } else {
            "."
        };
        println!(
            "{i:>3}  {input:<16} {target:<16} {}",
            if sample.loss_mask[i] { "x" } else { "" }
        );
    }
    println!("trained positions: {}", sample.masked_count());

    let prompt = assemble_inference_prompt(&audio, &vocab)?;
    assert_eq!(prompt.slots[..], sample.prompt.slots[..prompt.len()]);
    println!("inference prompt = first {} training slots", prompt.len());

    // what a perfect model would generate after the prompt
    let mut generated = tr.clone();
    generated.push(vocab.translation_sep());
    generated.extend(&tl);
    generated.push(vocab.eos());
    let (t, s) = split_output(&generated, &vocab)?;
    println!("decoded: transcript {t:?}, translation {s:?}");
    Ok(())
}
