//! Greedy and beam-search generation over any next-token scorer.

use std::cmp::Ordering;

use thiserror::Error;

use crate::microlm::{lm_forward, LmError, LmParams, LoraParams};
use crate::tensor::{argmax, log_softmax, Matrix};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be >= 1")]
    ZeroBeam,
    #[error("max_len must be >= 1")]
    ZeroMaxLen,
    #[error("model returned {found} scores for a vocabulary of {expected}")]
    BadScores { expected: usize, found: usize },
    #[error("end-of-sequence id {eos} outside vocabulary of {vocab}")]
    BadEos { eos: usize, vocab: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Scores the next token given the tokens generated so far.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary for the token after `generated`.
    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError>;
}

impl<M: StepModel + ?Sized> StepModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
        (**self).next_log_probs(generated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids, ending in the end-of-sequence id when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated ids without the trailing end-of-sequence id.
    pub fn output(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub eos: usize,
    /// Divides scores by `len^alpha` when ranking. `None` ranks by raw sum.
    pub length_penalty: Option<f64>,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize, eos: usize) -> Self {
        Self {
            beam_size,
            max_len,
            eos,
            length_penalty: None,
        }
    }
}

fn scores<M: StepModel>(model: &M, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
    let lp = model.next_log_probs(generated)?;
    if lp.len() != model.vocab_size() {
        return Err(DecodeError::BadScores {
            expected: model.vocab_size(),
            found: lp.len(),
        });
    }
    Ok(lp)
}

fn check_eos<M: StepModel>(model: &M, eos: usize) -> Result<(), DecodeError> {
    if eos >= model.vocab_size() {
        return Err(DecodeError::BadEos {
            eos,
            vocab: model.vocab_size(),
        });
    }
    Ok(())
}

/// Appends the arg-max token (smaller id on ties) until end-of-sequence or `max_len` steps.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    max_len: usize,
    eos: usize,
) -> Result<BeamHypothesis, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    check_eos(model, eos)?;
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let lp = scores(model, &hyp.tokens)?;
        let next = argmax(&lp);
        hyp.tokens.push(next);
        hyp.log_prob += lp[next];
        if next == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

fn rank_key(h: &BeamHypothesis, penalty: Option<f64>) -> f64 {
    match penalty {
        Some(alpha) if !h.tokens.is_empty() => h.log_prob / (h.tokens.len() as f64).powf(alpha),
        _ => h.log_prob,
    }
}

/// Better-first ordering: higher score, then lexicographically smaller ids.
fn compare(a: &BeamHypothesis, b: &BeamHypothesis, penalty: Option<f64>) -> Ordering {
    rank_key(b, penalty)
        .total_cmp(&rank_key(a, penalty))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over cumulative log-probability.
///
/// Finished hypotheses stay in the pool and keep their slot. The search ends
/// when every pooled hypothesis is finished or after `max_len` steps; the
/// best finished hypothesis is returned, or the best unfinished one if none
/// finished.
pub fn beam_search<M: StepModel>(
    model: &M,
    cfg: &BeamConfig,
) -> Result<BeamHypothesis, DecodeError> {
    if cfg.beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if cfg.max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    check_eos(model, cfg.eos)?;
    let mut pool = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..cfg.max_len {
        if pool.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for h in pool {
            if h.finished {
                candidates.push(h);
                continue;
            }
            let lp = scores(model, &h.tokens)?;
            for (tok, l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                candidates.push(BeamHypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished: tok == cfg.eos,
                });
            }
        }
        candidates.sort_by(|a, b| compare(a, b, cfg.length_penalty));
        candidates.truncate(cfg.beam_size);
        pool = candidates;
    }
    let best_finished = pool
        .iter()
        .filter(|h| h.finished)
        .min_by(|a, b| compare(a, b, cfg.length_penalty));
    let best = best_finished
        .or_else(|| pool.iter().min_by(|a, b| compare(a, b, cfg.length_penalty)))
        .expect("pool never empty")
        .clone();
    Ok(best)
}

/// The micro LM conditioned on a fixed prompt embedding sequence.
pub struct PromptedLm<'a> {
    pub params: &'a LmParams,
    pub lora: Option<&'a LoraParams>,
    pub prompt: &'a Matrix,
}

impl PromptedLm<'_> {
    /// Generation steps available before the model's context is full.
    pub fn capacity(&self) -> usize {
        // the last generated token never needs to be fed back
        (self.params.config.max_len + 1).saturating_sub(self.prompt.rows())
    }
}

impl StepModel for PromptedLm<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let d = self.params.config.d_model;
        let mut data = Vec::with_capacity((self.prompt.rows() + generated.len()) * d);
        data.extend_from_slice(self.prompt.as_slice());
        for &t in generated {
            if t >= self.vocab_size() {
                return Err(LmError::Shape(format!("token id {t} outside vocabulary")).into());
            }
            data.extend_from_slice(self.params.tok_emb.row(t));
        }
        let seq = Matrix::from_vec(self.prompt.rows() + generated.len(), d, data);
        let logits = lm_forward(self.params, self.lora, &seq)?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }
}
