//! Greedy and beam decoding, first on a hand-written model where beam search
//! wins, then on an untrained transformer conditioned on a random prompt.
//!
//! `cargo run --example decoding`

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stllm::decoding::{beam_search, greedy_decode, BeamConfig, DecodeError, PromptedLm, StepModel};
use stllm::microlm::{LmConfig, LmParams};
use stllm::tensor::Matrix;

/// Token 1 looks best first but leads nowhere good; token 2 pays off.
struct Garden;

impl StepModel for Garden {
    fn vocab_size(&self) -> usize {
        3
    }

    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let p: [f64; 3] = match generated {
            [] => [0.0, 0.6, 0.4],
            [1] => [0.4, 0.3, 0.3],
            [2] => [0.95, 0.0, 0.05],
            _ => [1.0, 0.0, 0.0],
        };
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

fn main() -> Result<()> {
    let eos = 0;
    let g = greedy_decode(&Garden, 3, eos)?;
    let b = beam_search(&Garden, &BeamConfig::new(2, 3, eos))?;
    println!("greedy {:?}  p={:.3}", g.output(), g.log_prob.exp());
    println!("beam=2 {:?}  p={:.3}", b.output(), b.log_prob.exp());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LmConfig {
        vocab_size: 10,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 24,
        tied_head: true,
    };
    let params = LmParams::init(&cfg, &mut rng)?;
    let prompt = Matrix::randn(5, 16, 1.0, &mut rng);
    let lm = PromptedLm {
        params: &params,
        lora: None,
        prompt: &prompt,
    };
    for beam in [1, 2, 4] {
        let h = beam_search(&lm, &BeamConfig::new(beam, lm.capacity().min(8), 1))?;
        println!(
            "beam={beam} {:?} finished={} log p={:.3}",
            h.output(),
            h.finished,
            h.log_prob
        );
    }
    Ok(())
}
