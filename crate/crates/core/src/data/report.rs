//! Evaluation report document, serialized as pretty JSON with a fixed key order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSetScores {
    pub id: String,
    /// Fraction, not percent. May exceed 1 with many insertions.
    pub wer: Option<f64>,
    pub bleu_doc: Option<f64>,
    pub bleu_reseg: Option<f64>,
    pub hyp_segments: usize,
    pub ref_segments: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub test_sets: Vec<TestSetScores>,
    pub tool_versions: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(system: impl Into<String>) -> Self {
        let mut tool_versions = BTreeMap::new();
        tool_versions.insert(
            env!("CARGO_PKG_NAME").to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        );
        Self {
            system: system.into(),
            test_sets: Vec::new(),
            tool_versions,
        }
    }

    pub fn test_set(&self, id: &str) -> Option<&TestSetScores> {
        self.test_sets.iter().find(|t| t.id == id)
    }

    /// Merges `scores` into the entry with the same id, or appends it.
    pub fn upsert(&mut self, scores: TestSetScores) {
        match self.test_sets.iter_mut().find(|t| t.id == scores.id) {
            Some(existing) => {
                existing.wer = scores.wer.or(existing.wer);
                existing.bleu_doc = scores.bleu_doc.or(existing.bleu_doc);
                existing.bleu_reseg = scores.bleu_reseg.or(existing.bleu_reseg);
                existing.hyp_segments = scores.hyp_segments;
                existing.ref_segments = scores.ref_segments;
            }
            None => self.test_sets.push(scores),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for t in &self.test_sets {
            if let Some(w) = t.wer {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(DataError::InvalidReport(format!(
                        "{}: wer {w} out of range",
                        t.id
                    )));
                }
            }
            for b in [t.bleu_doc, t.bleu_reseg].into_iter().flatten() {
                if !(0.0..=100.0).contains(&b) {
                    return Err(DataError::InvalidReport(format!(
                        "{}: bleu {b} out of range",
                        t.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let r: Self =
            serde_json::from_str(text).map_err(|e| DataError::InvalidReport(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    report.validate()?;
    fs::write(path, report.to_text()).map_err(|e| DataError::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    EvalReport::from_text(&text)
}
