//! Normalization, WER, minimum-WER resegmentation, BLEU and report tables.

use thiserror::Error;

pub mod bleu;
pub mod normalize;
pub mod render;
pub mod reseg;
pub mod wer;

pub use bleu::{bleu_corpus, bleu_tokenize, BleuMode, BleuScore, Smoothing};
pub use normalize::lpw_normalize;
pub use render::{format_bleu_pair, format_wer, render_report};
pub use reseg::{mwer_resegment, SegmentedDoc};
pub use wer::{edit_distance, word_wer, WerBreakdown};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("{hyp} hypothesis segments for {refs} reference segments")]
    SegmentCount { hyp: usize, refs: usize },
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// LPW-normalizes both sides, resegments the hypothesis and sums the
/// per-segment alignment counts.
pub fn score_asr(hyp_doc: &[String], ref_doc: &[String]) -> Result<WerBreakdown, EvalError> {
    let refs: Vec<Vec<String>> = ref_doc
        .iter()
        .map(|s| split_words(&lpw_normalize(s)))
        .collect();
    if refs.iter().all(Vec::is_empty) {
        return Err(EvalError::EmptyReference);
    }
    let hyp: Vec<String> = hyp_doc
        .iter()
        .flat_map(|s| split_words(&lpw_normalize(s)))
        .collect();
    let (doc, _) = mwer_resegment(&hyp, &refs);
    let mut total = WerBreakdown::default();
    for (h, r) in doc.segments.iter().zip(&refs) {
        total.add(&wer::alignment_counts(r, h));
    }
    Ok(total)
}

/// Translation BLEU on case- and punctuation-preserving text.
pub fn score_st(
    hyp_doc: &[String],
    ref_doc: &[String],
    mode: BleuMode,
) -> Result<BleuScore, EvalError> {
    bleu_corpus(hyp_doc, ref_doc, mode, Smoothing::Exp)
}
