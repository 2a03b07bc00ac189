//! Line-delimited JSON manifest: one record per line, UTF-8.
//!
//! ```text
//! {"id":"syn-0000","features":"features/syn-0000.stfz","transcript":"ba ko","translation":"fen dan","labels":[1,1,4,4,4]}
//! ```
//!
//! `features` is resolved relative to the manifest's directory. `translation`
//! may be omitted for inference-only records. `labels` optionally carries one
//! frame label per feature frame (0 is the blank label) for the CTC-collapse
//! adapter path.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, FeatureSequence};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub features: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    base_dir: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(
        base_dir: impl Into<PathBuf>,
        records: Vec<ManifestRecord>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            base_dir: base_dir.into(),
            records,
        })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn features_path(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.features)
    }

    pub fn load_features(&self, record: &ManifestRecord) -> Result<FeatureSequence, DataError> {
        let seq = read_features(self.features_path(record))?;
        if let Some(labels) = &record.labels {
            if labels.len() != seq.frames() {
                return Err(DataError::LabelCount {
                    id: record.id.clone(),
                    labels: labels.len(),
                    frames: seq.frames(),
                });
            }
        }
        Ok(seq)
    }

    /// Checks that every record points at a well-formed feature file.
    pub fn validate(&self) -> Result<(), DataError> {
        self.records
            .iter()
            .try_for_each(|r| self.load_features(r).map(|_| ()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(base_dir: impl Into<PathBuf>, text: &str) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| DataError::ManifestLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Self::new(base_dir, records)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(base, &text)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| DataError::io(path, e))
}
