//! Low-rank adaptation of the block weight matrices.
//!
//! Weights act on row vectors (`y = x · W`, `W` is `d_in × d_out`), so the
//! adapted weight is `W + (alpha / r) · A · B` with `A: d_in × r` and
//! `B: r × d_out`. `B` starts at zero, which makes the adapted model equal
//! to the base model until the first update.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

use super::LmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
        LoraTarget::FfIn,
        LoraTarget::FfOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
            LoraTarget::FfIn => "ff_in",
            LoraTarget::FfOut => "ff_out",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 8.0,
            targets: LoraTarget::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `d_in × r`
    pub a: Matrix,
    /// `r × d_out`
    pub b: Matrix,
}

impl LoraPair {
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        r: usize,
        rng: &mut R,
    ) -> Result<Self, LmError> {
        if r == 0 || r > d_in.min(d_out) {
            return Err(LmError::LoraRank {
                r,
                rows: d_in,
                cols: d_out,
            });
        }
        Ok(Self {
            a: Matrix::randn(d_in, r, 1.0 / (d_in as f64).sqrt(), rng),
            b: Matrix::zeros(r, d_out),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
        }
    }
}

/// `W + scaling · A · B`
pub fn lora_effective_weight(w: &Matrix, scaling: f64, pair: &LoraPair) -> Result<Matrix, LmError> {
    let r = pair.a.cols();
    if r == 0 || r > w.rows().min(w.cols()) {
        return Err(LmError::LoraRank {
            r,
            rows: w.rows(),
            cols: w.cols(),
        });
    }
    if pair.a.rows() != w.rows() || pair.b.rows() != r || pair.b.cols() != w.cols() {
        return Err(LmError::Shape(format!(
            "lora A {:?} / B {:?} do not fit weight {:?}",
            pair.a.shape(),
            pair.b.shape(),
            w.shape()
        )));
    }
    let mut delta = pair.a.matmul(&pair.b);
    delta.scale(scaling);
    let mut out = w.clone();
    out.add_assign(&delta);
    Ok(out)
}

/// Gradients of `A` and `B` given the gradient of the effective weight.
pub fn lora_backward(grad_eff: &Matrix, scaling: f64, pair: &LoraPair) -> LoraPair {
    let mut a = grad_eff.matmul_t(&pair.b);
    a.scale(scaling);
    let mut b = pair.a.t_matmul(grad_eff);
    b.scale(scaling);
    LoraPair { a, b }
}

/// Adapters for every block, keyed by target matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams {
    pub scaling: f64,
    pub blocks: Vec<BTreeMap<LoraTarget, LoraPair>>,
}

impl LoraParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            scaling: self.scaling,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|(t, p)| (*t, p.zeros_like())).collect())
                .collect(),
        }
    }

    pub fn pair(&self, block: usize, target: LoraTarget) -> Option<&LoraPair> {
        self.blocks.get(block).and_then(|b| b.get(&target))
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (t, p) in block {
                out.push((format!("lora.{i}.{}.a", t.name()), p.a.as_slice()));
                out.push((format!("lora.{i}.{}.b", t.name()), p.b.as_slice()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (t, p) in block.iter_mut() {
                out.push((format!("lora.{i}.{}.a", t.name()), p.a.as_mut_slice()));
                out.push((format!("lora.{i}.{}.b", t.name()), p.b.as_mut_slice()));
            }
        }
        out
    }
}

/// Resolves the weight used in the forward pass.
pub(crate) fn effective<'a>(
    w: &'a Matrix,
    lora: Option<&LoraParams>,
    block: usize,
    target: LoraTarget,
) -> Result<Cow<'a, Matrix>, LmError> {
    match lora.and_then(|l| l.pair(block, target).map(|p| (l.scaling, p))) {
        Some((s, p)) => Ok(Cow::Owned(lora_effective_weight(w, s, p)?)),
        None => Ok(Cow::Borrowed(w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_scaling_is_one() {
        let cfg = LoraConfig::default();
        assert_eq!((cfg.r, cfg.alpha), (8, 8.0));
        assert_eq!(cfg.scaling(), 1.0);
    }

    #[test]
    fn zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Matrix::randn(6, 5, 1.0, &mut rng);
        let p = LoraPair::init(6, 5, 2, &mut rng).unwrap();
        assert_eq!(lora_effective_weight(&w, 4.0, &p).unwrap(), w);
    }

    #[test]
    fn matches_dense_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (din, dout, r) = (
                rng.random_range(3..9),
                rng.random_range(3..9),
                rng.random_range(1..3),
            );
            let w = Matrix::randn(din, dout, 1.0, &mut rng);
            let p = LoraPair {
                a: Matrix::randn(din, r, 1.0, &mut rng),
                b: Matrix::randn(r, dout, 1.0, &mut rng),
            };
            let s = 0.75;
            let eff = lora_effective_weight(&w, s, &p).unwrap();
            for i in 0..din {
                for j in 0..dout {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += p.a[(i, k)] * p.b[(k, j)];
                    }
                    assert!((eff[(i, j)] - (w[(i, j)] + s * acc)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rank_too_large_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            LoraPair::init(4, 3, 4, &mut rng),
            Err(LmError::LoraRank { r: 4, .. })
        ));
        let w = Matrix::zeros(2, 2);
        let p = LoraPair {
            a: Matrix::zeros(2, 3),
            b: Matrix::zeros(3, 2),
        };
        assert!(matches!(
            lora_effective_weight(&w, 1.0, &p),
            Err(LmError::LoraRank { .. })
        ));
    }
}
