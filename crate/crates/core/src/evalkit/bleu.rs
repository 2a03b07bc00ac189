use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::normalize::is_punctuation;
use super::reseg::mwer_resegment;
use super::EvalError;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Each side concatenated into a single segment.
    DocAsWhole,
    /// Hypothesis resegmented against the references, then scored segment-wise.
    Resegmented,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Zero-match precisions become `1 / (2^k · total)` for the k-th such order.
    #[default]
    Exp,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0..=100
    pub score: f64,
    /// Per-order precisions after smoothing, as fractions.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Whitespace split with every punctuation character as its own token.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_punctuation(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NgramStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramStats {
    pub fn add(&mut self, other: &NgramStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches of one segment pair.
pub fn segment_stats(hyp: &[String], reference: &[String]) -> NgramStats {
    let mut s = NgramStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h
            .iter()
            .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

/// BLEU from aggregated statistics. Orders with no hypothesis n-grams are
/// left out of the geometric mean.
pub fn bleu_from_stats(s: &NgramStats, smoothing: Smoothing) -> BleuScore {
    let mut precisions = Vec::new();
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if s.totals[n] == 0 {
            break;
        }
        let p = if s.matches[n] == 0 {
            match smoothing {
                Smoothing::Exp => {
                    smooth *= 2.0;
                    1.0 / (smooth * s.totals[n] as f64)
                }
                Smoothing::None => 0.0,
            }
        } else {
            s.matches[n] as f64 / s.totals[n] as f64
        };
        precisions.push(p);
    }
    let brevity_penalty = if s.hyp_len == 0 {
        0.0
    } else if s.hyp_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if s.matches[0] == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len: s.hyp_len,
        ref_len: s.ref_len,
    }
}

/// Corpus BLEU over raw text segments.
///
/// In [`BleuMode::Resegmented`] the hypothesis segment boundaries are
/// ignored: its words are re-split to the reference segmentation first.
pub fn bleu_corpus(
    hyp_segments: &[String],
    ref_segments: &[String],
    mode: BleuMode,
    smoothing: Smoothing,
) -> Result<BleuScore, EvalError> {
    if ref_segments.is_empty() || ref_segments.iter().all(|r| r.trim().is_empty()) {
        return Err(EvalError::EmptyReference);
    }
    let pairs: Vec<(String, String)> = match mode {
        BleuMode::DocAsWhole => vec![(hyp_segments.join(" "), ref_segments.join(" "))],
        BleuMode::Resegmented => {
            let hyp_words: Vec<String> = hyp_segments
                .iter()
                .flat_map(|s| s.split_whitespace().map(str::to_string))
                .collect();
            let refs: Vec<Vec<String>> = ref_segments
                .iter()
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .collect();
            let (doc, _) = mwer_resegment(&hyp_words, &refs);
            doc.joined()
                .into_iter()
                .zip(ref_segments.iter().cloned())
                .collect()
        }
    };
    let mut total = NgramStats::default();
    for (h, r) in &pairs {
        total.add(&segment_stats(&bleu_tokenize(h), &bleu_tokenize(r)));
    }
    Ok(bleu_from_stats(&total, smoothing))
}
