//! Builds evaluation reports for two systems and renders the tables.
//!
//! `cargo run --example report`

use anyhow::Result;
use stllm::data::{read_report, write_report, EvalReport, TestSetScores};
use stllm::evalkit::render_report;

fn scores(id: &str, wer: Option<f64>, doc: Option<f64>, reseg: Option<f64>) -> TestSetScores {
    TestSetScores {
        id: id.into(),
        wer,
        bleu_doc: doc,
        bleu_reseg: reseg,
        ..Default::default()
    }
}

fn main() -> Result<()> {
    let mut a = EvalReport::new("ctc-collapse");
    a.upsert(scores("tst-COMMON", Some(0.041), Some(41.33), Some(31.98)));
    a.upsert(scores("tst-HE", Some(0.057), None, Some(29.4)));
    let mut b = EvalReport::new("conv5x5");
    b.upsert(scores("tst-COMMON", Some(0.0462), Some(40.1), None));

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("a.json");
    write_report(&a, &path)?;
    assert_eq!(read_report(&path)?, a);

    print!("{}", render_report(&[a, b]));
    Ok(())
}
