//! Normalization, WER with resegmentation and the two BLEU modes.
//!
//! `cargo run --example metrics`

use anyhow::Result;
use stllm::evalkit::{
    bleu_corpus, lpw_normalize, mwer_resegment, score_asr, score_st, word_wer, BleuMode, Smoothing,
};

fn words(s: &str) -> Vec<String> {
    lpw_normalize(s)
        .split_whitespace()
        .map(String::from)
        .collect()
}

fn main() -> Result<()> {
    println!("{:?}", lpw_normalize("  Hello, World!  It's  \"fine\"."));

    let b = word_wer(
        &words("the cat sat on the mat"),
        &words("the cat sat on mat today"),
    )?;
    println!(
        "WER {:.3}  (S={} D={} I={} N={})",
        b.wer(),
        b.substitutions,
        b.deletions,
        b.insertions,
        b.ref_words
    );

    // a hypothesis whose line breaks do not match the reference segments
    let refs = vec![
        "Good morning.".to_string(),
        "How are you today?".to_string(),
    ];
    let hyp = vec!["good morning how".to_string(), "are you today".to_string()];
    let ref_words: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
    let hyp_words: Vec<String> = hyp.iter().flat_map(|h| words(h)).collect();
    let (doc, cost) = mwer_resegment(&hyp_words, &ref_words);
    println!("resegmented {:?} at cost {cost}", doc.joined());
    println!(
        "ASR WER after resegmentation {:.3}",
        score_asr(&hyp, &refs)?.wer()
    );

    let refs_st = vec![
        "Guten Morgen.".to_string(),
        "Wie geht es dir heute?".to_string(),
    ];
    let hyp_st = vec![
        "Guten Morgen. Wie".to_string(),
        "geht es dir heute?".to_string(),
    ];
    let doc = score_st(&hyp_st, &refs_st, BleuMode::DocAsWhole)?;
    let reseg = score_st(&hyp_st, &refs_st, BleuMode::Resegmented)?;
    println!(
        "BLEU doc-as-whole {:.2}, resegmented {:.2}",
        doc.score, reseg.score
    );

    let fixture = bleu_corpus(
        &["the cat".into()],
        &["the cat sat".into()],
        BleuMode::DocAsWhole,
        Smoothing::Exp,
    )?;
    println!(
        "\"the cat\" vs \"the cat sat\": {:.4} (bp {:.4})",
        fixture.score, fixture.brevity_penalty
    );
    Ok(())
}
