//! Binary feature-file codec.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STFZ"
//! 4       1     version (1)
//! 5       4     T, frame count (u32)
//! 9       4     d, feature dimension (u32)
//! 13      4·T·d payload, IEEE-754 binary32, row-major by frame
//! ```

use std::fs;
use std::path::Path;

use crate::tensor::Matrix;

use super::DataError;

pub const FEATURE_MAGIC: [u8; 4] = *b"STFZ";
pub const FEATURE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}, expected \"STFZ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature-file version {0}")]
    UnsupportedVersion(u8),
    #[error("header truncated: {0} bytes, need {HEADER_LEN}")]
    TruncatedHeader(usize),
    #[error("payload truncated: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("trailing bytes: header declares {expected} payload bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("frame count {frames} x dimension {dim} overflows the addressable payload size")]
    SizeOverflow { frames: u32, dim: u32 },
    #[error("empty shape: T={frames}, d={dim}; both must be at least 1")]
    EmptyShape { frames: usize, dim: usize },
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("value count {len} does not match T={frames} x d={dim}")]
    ShapeMismatch {
        frames: usize,
        dim: usize,
        len: usize,
    },
}

/// A `T×d` matrix of encoder hidden states, stored at encoder precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self, FormatError> {
        if frames == 0 || dim == 0 {
            return Err(FormatError::EmptyShape { frames, dim });
        }
        if frames.checked_mul(dim) != Some(values.len()) {
            return Err(FormatError::ShapeMismatch {
                frames,
                dim,
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                frame: i / dim,
                dim: i % dim,
            });
        }
        Ok(Self {
            frames,
            dim,
            values,
        })
    }

    /// Rounds an `f64` matrix to encoder precision.
    pub fn from_matrix(m: &Matrix) -> Result<Self, FormatError> {
        let values = m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(m.rows(), m.cols(), values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Widens to `f64` for adapter and model math.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.frames,
            self.dim,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.push(FEATURE_VERSION);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < HEADER_LEN {
            // a short file with the wrong magic is still a magic error
            if bytes.len() >= 4 && bytes[..4] != FEATURE_MAGIC {
                return Err(FormatError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(FormatError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != FEATURE_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        if bytes[4] != FEATURE_VERSION {
            return Err(FormatError::UnsupportedVersion(bytes[4]));
        }
        let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let expected = u64::from(frames)
            .checked_mul(u64::from(dim))
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| usize::try_from(n).is_ok())
            .ok_or(FormatError::SizeOverflow { frames, dim })?;
        let found = (bytes.len() - HEADER_LEN) as u64;
        if found < expected {
            return Err(FormatError::TruncatedPayload { expected, found });
        }
        if found > expected {
            return Err(FormatError::TrailingBytes { expected, found });
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames as usize, dim as usize, values)
    }
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, seq.encode()).map_err(|e| DataError::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    FeatureSequence::decode(&bytes).map_err(|source| DataError::Format {
        path: path.to_path_buf(),
        source,
    })
}
