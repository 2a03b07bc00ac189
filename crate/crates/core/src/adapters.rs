//! Length adapters and the projection into the language model's embedding space.
//!
//! Two ways of shortening an encoder frame sequence before it is used as a
//! prompt:
//!
//! * **CTC collapse** groups maximal runs of frames that share a greedy CTC
//!   label and replaces each run with the mean of its frames. Runs labelled
//!   blank are dropped unless `keep_blanks` is set. No learnable parameters.
//! * **Strided convolution** with kernel 5 and stride 5. The input is
//!   zero-padded on the right to a multiple of 5, so the output has
//!   `ceil(T / 5)` frames. No activation.
//!
//! The projection is one affine map per frame, `x · W + b`, again with no
//! activation.
//!
//! All math is `f64`. Backward passes return exact gradients; the frozen
//! encoder boundary is enforced by callers, which never consume the
//! gradient with respect to raw encoder features.

use rand::Rng;

use crate::tensor::{argmax, log_softmax, Matrix};

pub const CONV_KERNEL: usize = 5;
pub const CONV_STRIDE: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AdapterError {
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("label vocabulary must have at least 2 entries, got {0}")]
    TooFewLabels(usize),
    #[error("{labels} labels for {frames} frames")]
    LabelLength { labels: usize, frames: usize },
    #[error("every frame is blank; collapse with dropped blanks would be empty")]
    EmptyCollapse,
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("gradient shape mismatch: expected {expected:?}, found {found:?}")]
    GradShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite frame logits")]
    NonFinite,
}

/// One label per encoder frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels {
    pub labels: Vec<u32>,
    pub blank_id: u32,
}

/// A maximal run of identically labelled frames, `start..start + len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelRun {
    pub label: u32,
    pub start: usize,
    pub len: usize,
}

/// Per-frame argmax of CTC logits; ties resolve to the smaller label id.
pub fn ctc_greedy_labels(
    frame_logits: &Matrix,
    blank_id: u32,
) -> Result<FrameLabels, AdapterError> {
    if frame_logits.rows() == 0 {
        return Err(AdapterError::EmptySequence);
    }
    if frame_logits.cols() < 2 {
        return Err(AdapterError::TooFewLabels(frame_logits.cols()));
    }
    if !frame_logits.is_finite() {
        return Err(AdapterError::NonFinite);
    }
    let labels = frame_logits.iter_rows().map(|r| argmax(r) as u32).collect();
    Ok(FrameLabels { labels, blank_id })
}

pub fn label_runs(labels: &[u32]) -> Vec<LabelRun> {
    let mut runs: Vec<LabelRun> = Vec::new();
    for (t, &label) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.label == label => run.len += 1,
            _ => runs.push(LabelRun {
                label,
                start: t,
                len: 1,
            }),
        }
    }
    runs
}

/// Replaces each maximal label run with the mean of its frames.
pub fn ctc_collapse(
    seq: &Matrix,
    labels: &FrameLabels,
    keep_blanks: bool,
) -> Result<Matrix, AdapterError> {
    if seq.rows() == 0 {
        return Err(AdapterError::EmptySequence);
    }
    if labels.labels.len() != seq.rows() {
        return Err(AdapterError::LabelLength {
            labels: labels.labels.len(),
            frames: seq.rows(),
        });
    }
    let runs: Vec<LabelRun> = label_runs(&labels.labels)
        .into_iter()
        .filter(|r| keep_blanks || r.label != labels.blank_id)
        .collect();
    if runs.is_empty() {
        return Err(AdapterError::EmptyCollapse);
    }
    let mut out = Matrix::zeros(runs.len(), seq.cols());
    for (i, run) in runs.iter().enumerate() {
        let row = out.row_mut(i);
        for t in run.start..run.start + run.len {
            for (o, v) in row.iter_mut().zip(seq.row(t)) {
                *o += v;
            }
        }
        let inv = 1.0 / run.len as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

pub fn conv_output_len(frames: usize) -> usize {
    frames.div_ceil(CONV_STRIDE)
}

/// Kernel-5, stride-5 convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAdapterParams {
    /// `kernel[j]` is the `d_in × d_out` tap applied to frame `t'·5 + j`.
    pub kernel: Vec<Matrix>,
    pub bias: Vec<f64>,
}

impl ConvAdapterParams {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            kernel: (0..CONV_KERNEL)
                .map(|_| Matrix::zeros(d_in, d_out))
                .collect(),
            bias: vec![0.0; d_out],
        }
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / ((CONV_KERNEL * d_in) as f64).sqrt();
        Self {
            kernel: (0..CONV_KERNEL)
                .map(|_| Matrix::randn(d_in, d_out, std, rng))
                .collect(),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.kernel[0].rows()
    }

    pub fn d_out(&self) -> usize {
        self.kernel[0].cols()
    }
}

pub fn conv_forward(seq: &Matrix, p: &ConvAdapterParams) -> Result<Matrix, AdapterError> {
    if seq.rows() == 0 {
        return Err(AdapterError::EmptySequence);
    }
    if seq.cols() != p.d_in() {
        return Err(AdapterError::DimMismatch {
            expected: p.d_in(),
            found: seq.cols(),
        });
    }
    let out_len = conv_output_len(seq.rows());
    let mut out = Matrix::zeros(out_len, p.d_out());
    for o in 0..out_len {
        out.row_mut(o).copy_from_slice(&p.bias);
        for (j, tap) in p.kernel.iter().enumerate() {
            let t = o * CONV_STRIDE + j;
            if t >= seq.rows() {
                break; // zero padding
            }
            let x = seq.row(t);
            let row = out.row_mut(o);
            for (i, &xi) in x.iter().enumerate() {
                for (r, w) in row.iter_mut().zip(tap.row(i)) {
                    *r += xi * w;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv_forward` given `upstream = dL/d(output)`.
///
/// The returned input gradient has `T` rows; padded positions are discarded.
pub fn conv_backward(
    seq: &Matrix,
    p: &ConvAdapterParams,
    upstream: &Matrix,
) -> Result<(Matrix, ConvAdapterParams), AdapterError> {
    if seq.cols() != p.d_in() {
        return Err(AdapterError::DimMismatch {
            expected: p.d_in(),
            found: seq.cols(),
        });
    }
    let expected = (conv_output_len(seq.rows()), p.d_out());
    if upstream.shape() != expected {
        return Err(AdapterError::GradShape {
            expected,
            found: upstream.shape(),
        });
    }
    let mut grad_seq = Matrix::zeros(seq.rows(), seq.cols());
    let mut grads = ConvAdapterParams::zeros(p.d_in(), p.d_out());
    grads.bias = upstream.sum_rows();
    for o in 0..upstream.rows() {
        let g = upstream.row(o);
        for j in 0..CONV_KERNEL {
            let t = o * CONV_STRIDE + j;
            if t >= seq.rows() {
                break;
            }
            let x = seq.row(t);
            let tap = &p.kernel[j];
            let gtap = &mut grads.kernel[j];
            for (i, &xi) in x.iter().enumerate() {
                for (gw, &gv) in gtap.row_mut(i).iter_mut().zip(g) {
                    *gw += xi * gv;
                }
                grad_seq[(t, i)] += crate::tensor::dot(tap.row(i), g);
            }
        }
    }
    Ok((grad_seq, grads))
}

/// Per-frame affine map from encoder width to model width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `d_enc × d_model`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionParams {
    pub fn zeros(d_enc: usize, d_model: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_enc, d_model),
            bias: vec![0.0; d_model],
        }
    }

    pub fn init<R: Rng + ?Sized>(d_enc: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::randn(d_enc, d_model, 1.0 / (d_enc as f64).sqrt(), rng),
            bias: vec![0.0; d_model],
        }
    }

    pub fn d_enc(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.cols()
    }
}

pub fn projection_forward(seq: &Matrix, p: &ProjectionParams) -> Result<Matrix, AdapterError> {
    if seq.cols() != p.d_enc() {
        return Err(AdapterError::DimMismatch {
            expected: p.d_enc(),
            found: seq.cols(),
        });
    }
    let mut out = seq.matmul(&p.weight);
    out.add_row_vector(&p.bias);
    Ok(out)
}

pub fn projection_backward(
    seq: &Matrix,
    p: &ProjectionParams,
    upstream: &Matrix,
) -> Result<(Matrix, ProjectionParams), AdapterError> {
    if seq.cols() != p.d_enc() {
        return Err(AdapterError::DimMismatch {
            expected: p.d_enc(),
            found: seq.cols(),
        });
    }
    let expected = (seq.rows(), p.d_model());
    if upstream.shape() != expected {
        return Err(AdapterError::GradShape {
            expected,
            found: upstream.shape(),
        });
    }
    let grad_seq = upstream.matmul_t(&p.weight);
    let grads = ProjectionParams {
        weight: seq.t_matmul(upstream),
        bias: upstream.sum_rows(),
    };
    Ok((grad_seq, grads))
}

/// Frozen linear frame labeller, an alternative to ground-truth frame labels
/// for the CTC-collapse path. Trained once with framewise cross-entropy, then
/// only used through [`FrameClassifier::labels`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClassifier {
    /// `d_enc × n_labels`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub blank_id: u32,
}

impl FrameClassifier {
    /// Full-batch gradient descent on softmax cross-entropy.
    pub fn train(
        frames: &[Matrix],
        labels: &[Vec<u32>],
        n_labels: usize,
        blank_id: u32,
        epochs: usize,
        lr: f64,
    ) -> Result<Self, AdapterError> {
        let d = frames.first().ok_or(AdapterError::EmptySequence)?.cols();
        if n_labels < 2 {
            return Err(AdapterError::TooFewLabels(n_labels));
        }
        let total: usize = frames.iter().map(Matrix::rows).sum();
        if total == 0 {
            return Err(AdapterError::EmptySequence);
        }
        for (f, l) in frames.iter().zip(labels) {
            if f.cols() != d {
                return Err(AdapterError::DimMismatch {
                    expected: d,
                    found: f.cols(),
                });
            }
            if f.rows() != l.len() {
                return Err(AdapterError::LabelLength {
                    labels: l.len(),
                    frames: f.rows(),
                });
            }
        }
        let mut clf = Self {
            weight: Matrix::zeros(d, n_labels),
            bias: vec![0.0; n_labels],
            blank_id,
        };
        let scale = 1.0 / total as f64;
        for _ in 0..epochs {
            let mut gw = Matrix::zeros(d, n_labels);
            let mut gb = vec![0.0; n_labels];
            for (f, l) in frames.iter().zip(labels) {
                let logits = clf.logits(f);
                for (t, &y) in l.iter().enumerate() {
                    let mut p: Vec<f64> = log_softmax(logits.row(t))
                        .into_iter()
                        .map(f64::exp)
                        .collect();
                    p[y as usize] -= 1.0;
                    for (i, &x) in f.row(t).iter().enumerate() {
                        for (g, &pv) in gw.row_mut(i).iter_mut().zip(&p) {
                            *g += x * pv * scale;
                        }
                    }
                    for (g, &pv) in gb.iter_mut().zip(&p) {
                        *g += pv * scale;
                    }
                }
            }
            gw.scale(-lr);
            clf.weight.add_assign(&gw);
            for (b, g) in clf.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        Ok(clf)
    }

    pub fn logits(&self, frames: &Matrix) -> Matrix {
        let mut out = frames.matmul(&self.weight);
        out.add_row_vector(&self.bias);
        out
    }

    pub fn labels(&self, frames: &Matrix) -> Result<FrameLabels, AdapterError> {
        if frames.cols() != self.weight.rows() {
            return Err(AdapterError::DimMismatch {
                expected: self.weight.rows(),
                found: frames.cols(),
            });
        }
        ctc_greedy_labels(&self.logits(frames), self.blank_id)
    }
}
