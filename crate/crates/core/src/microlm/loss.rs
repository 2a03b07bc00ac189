use crate::tensor::{log_softmax, Matrix};

use super::LmError;

fn check(logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<usize, LmError> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(LmError::Shape(format!(
            "{} logits rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LmError::EmptyMask);
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t >= logits.cols() {
            return Err(LmError::Shape(format!(
                "target id {t} >= vocab {}",
                logits.cols()
            )));
        }
    }
    Ok(count)
}

/// Mean negative log-likelihood over mask-true positions.
pub fn masked_cross_entropy(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64, LmError> {
    let count = check(logits, targets, mask)?;
    let (sum, _) = masked_nll(logits, targets, mask, None)?;
    Ok(sum / count as f64)
}

/// Summed NLL over mask-true positions and `dlogits` scaled by `1 / normalizer`.
///
/// Training normalizes by the number of mask-true tokens in the whole batch,
/// so the normalizer is passed in rather than derived from this sequence.
pub fn masked_nll_with_grad(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
    normalizer: f64,
) -> Result<(f64, Matrix), LmError> {
    check(logits, targets, mask)?;
    let (sum, grad) = masked_nll(logits, targets, mask, Some(normalizer))?;
    Ok((sum, grad.expect("gradient requested")))
}

fn masked_nll(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
    normalizer: Option<f64>,
) -> Result<(f64, Option<Matrix>), LmError> {
    let mut sum = 0.0;
    let mut grad = normalizer.map(|_| Matrix::zeros(logits.rows(), logits.cols()));
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let lp = log_softmax(logits.row(i));
        sum -= lp[t];
        if let (Some(g), Some(n)) = (grad.as_mut(), normalizer) {
            let row = g.row_mut(i);
            for (gv, l) in row.iter_mut().zip(&lp) {
                *gv = l.exp() / n;
            }
            row[t] -= 1.0 / n;
        }
    }
    if !sum.is_finite() {
        return Err(LmError::NonFinite("loss".into()));
    }
    Ok((sum, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Matrix::zeros(3, 11);
        let loss = masked_cross_entropy(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((loss - (11f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            masked_cross_entropy(&logits, &[0, 1], &[false, false]),
            Err(LmError::EmptyMask)
        ));
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (l, v) = (rng.random_range(1..8), rng.random_range(2..9));
            let logits = Matrix::randn(l, v, 2.0, &mut rng);
            let targets: Vec<usize> = (0..l).map(|_| rng.random_range(0..v)).collect();
            let mut mask: Vec<bool> = (0..l).map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            // oracle: -log(exp(z_t) / sum exp(z)) per masked row
            let mut acc = 0.0;
            let mut n = 0.0;
            for i in 0..l {
                if mask[i] {
                    let z = logits.row(i);
                    let denom: f64 = z.iter().map(|x| x.exp()).sum();
                    acc += -(z[targets[i]].exp() / denom).ln();
                    n += 1.0;
                }
            }
            let got = masked_cross_entropy(&logits, &targets, &mask).unwrap();
            assert!((got - acc / n).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_out_targets_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Matrix::randn(5, 4, 1.0, &mut rng);
        let mask = [false, true, false, true, false];
        let a = masked_cross_entropy(&logits, &[0, 1, 2, 3, 0], &mask).unwrap();
        let b = masked_cross_entropy(&logits, &[3, 1, 0, 3, 2], &mask).unwrap();
        assert_eq!(a, b);
    }
}
