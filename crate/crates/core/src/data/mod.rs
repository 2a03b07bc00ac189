//! On-disk formats and the synthetic corpus generator.

use std::path::{Path, PathBuf};

pub mod features;
pub mod manifest;
pub mod report;
pub mod synth;

pub use features::{read_features, write_features, FeatureSequence, FormatError};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRecord};
pub use report::{read_report, write_report, EvalReport, TestSetScores};
pub use synth::{synth_dataset, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Shape(#[from] FormatError),
    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },
    #[error("duplicate manifest id {0:?}")]
    DuplicateId(String),
    #[error("record {id}: {labels} frame labels for {frames} frames")]
    LabelCount {
        id: String,
        labels: usize,
        frames: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
