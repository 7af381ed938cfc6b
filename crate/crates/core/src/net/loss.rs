//! Training losses.
//!
//! The consistency objective is mask-weighted binary cross-entropy on
//! per-slot probabilities, normalized by the number of valid (pair, slot)
//! entries. Probabilities are clipped at 1e-7 inside the loss; where the
//! clip is active the gradient is exactly zero.

use ndarray::{Array2, NdFloat};

use crate::error::Error;
use crate::Result;

pub(crate) const PROB_EPS: f64 = 1e-7;

pub(crate) fn sigmoid<F: NdFloat>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Masked binary cross-entropy over logits.
///
/// Returns the scalar loss and the gradient with respect to the logits.
/// A batch where every slot is masked out is a degenerate-batch error.
pub(crate) fn masked_bce<F: NdFloat>(
    logits: &Array2<F>,
    y: &Array2<F>,
    mask: &Array2<F>,
) -> Result<(F, Array2<F>)> {
    let eps = F::from(PROB_EPS).unwrap();
    let one = F::one();
    let valid = mask.sum();
    if valid <= F::zero() {
        return Err(Error::DegenerateBatch);
    }

    let mut loss = F::zero();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for ((idx, &z), (&yv, &m)) in logits
        .indexed_iter()
        .zip(y.iter().zip(mask.iter()))
    {
        if m <= F::zero() {
            continue;
        }
        let p = sigmoid(z);
        let clipped = p.max(eps).min(one - eps);
        loss = loss - (yv * clipped.ln() + (one - yv) * (one - clipped).ln());
        // d(bce)/dz = p - y while the clip is inactive, zero otherwise.
        if p > eps && p < one - eps {
            dlogits[idx] = (p - yv) / valid;
        }
    }
    Ok((loss / valid, dlogits))
}

/// Softmax cross-entropy for the camera-classification objective.
pub(crate) fn softmax_ce<F: NdFloat>(
    logits: &Array2<F>,
    targets: &[usize],
) -> Result<(F, Array2<F>)> {
    let (n, _c) = logits.dim();
    if n != targets.len() || n == 0 {
        return Err(Error::Input("target count must match batch size".into()));
    }
    let probs = softmax_rows(logits);
    let eps = F::from(PROB_EPS).unwrap();
    let mut loss = F::zero();
    let mut dlogits = probs.clone();
    let inv_n = F::one() / F::from(n).unwrap();
    for (i, &t) in targets.iter().enumerate() {
        loss = loss - probs[[i, t]].max(eps).ln();
        dlogits[[i, t]] = dlogits[[i, t]] - F::one();
    }
    dlogits.mapv_inplace(|v| v * inv_n);
    Ok((loss * inv_n, dlogits))
}

/// Row-wise softmax with max-subtraction for stability.
pub(crate) fn softmax_rows<F: NdFloat>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn bce_at_one_half_is_ln_two() {
        // zero logits -> p = 0.5 everywhere
        let logits = Array2::<f64>::zeros((3, 4));
        let y = arr2(&[[1.0; 4]; 3]);
        let mask = Array2::ones((3, 4));
        let (loss, _) = masked_bce(&logits, &y, &mask).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_predictions_hit_clip_bound() {
        // saturated logits -> p clipped at 1e-7 / 1 - 1e-7
        let logits = arr2(&[[40.0f64, -40.0]]);
        let y = arr2(&[[1.0, 0.0]]);
        let mask = Array2::ones((1, 2));
        let (loss, dlogits) = masked_bce(&logits, &y, &mask).unwrap();
        assert!(loss <= 1.2e-7, "loss {loss}");
        assert!(loss > 0.0);
        // clipped entries carry no gradient
        assert_eq!(dlogits, Array2::zeros((1, 2)));
    }

    #[test]
    fn bce_masked_slots_contribute_nothing() {
        let logits = arr2(&[[3.0f64, -100.0]]);
        let y = arr2(&[[1.0, 1.0]]);
        let mask = arr2(&[[1.0, 0.0]]);
        let (loss, dlogits) = masked_bce(&logits, &y, &mask).unwrap();
        let p = sigmoid(3.0f64);
        assert!((loss + p.ln()).abs() < 1e-12);
        assert_eq!(dlogits[[0, 1]], 0.0);
        assert!((dlogits[[0, 0]] - (p - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_all_masked_is_degenerate() {
        let logits = Array2::<f64>::zeros((2, 3));
        let y = Array2::zeros((2, 3));
        let mask = Array2::zeros((2, 3));
        assert!(matches!(
            masked_bce(&logits, &y, &mask),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = arr2(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero_per_row() {
        let logits = arr2(&[[0.3f64, -0.2, 1.0]]);
        let (_, d) = softmax_ce(&logits, &[2]).unwrap();
        assert!(d.row(0).sum().abs() < 1e-12);
    }
}
