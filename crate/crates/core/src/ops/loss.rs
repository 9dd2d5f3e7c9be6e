//! Multi-label binary cross-entropy averaged over classes and batch.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn check<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<()> {
    probs.dims2()?;
    labels.expect_shape(probs.shape())?;
    if let Some(bad) = labels.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
        return Err(Error::Input(format!("labels must be 0 or 1, found {bad}")));
    }
    Ok(())
}

fn clamp_bounds<T: Element>() -> (T, T) {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    (lo, T::one() - lo)
}

/// `−(1/(B·n)) Σ [y log ŷ + (1 − y) log(1 − ŷ)]`.
pub fn bce_loss<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    check(probs, labels)?;
    let (lo, hi) = clamp_bounds::<T>();
    let sum: T = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            if y == T::one() {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum();
    Ok(sum / T::from_usize(probs.len().max(1)).unwrap())
}

/// Gradient of [`bce_loss`] with respect to the probabilities; zero where the
/// clamp is active.
pub fn bce_backward<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    check(probs, labels)?;
    let (lo, hi) = clamp_bounds::<T>();
    let n = T::from_usize(probs.len().max(1)).unwrap();
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (-y / p + (T::one() - y) / (T::one() - p)) / n
            }
        })
        .collect();
    Tensor::from_vec(probs.shape(), data)
}

/// Gradient of `bce_loss(sigmoid(z))` with respect to the logits `z`,
/// `(σ(z) − y) / (B·n)`, computed from the probabilities without dividing
/// by them.
pub fn bce_logits_backward<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    check(probs, labels)?;
    let n = T::from_usize(probs.len().max(1)).unwrap();
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| (p - y) / n)
        .collect();
    Tensor::from_vec(probs.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = Tensor::from_vec(
            &[2, 6],
            vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let loss = bce_loss(&y, &y).unwrap();
        assert!((0.0..=1e-6).contains(&loss), "{loss}");
    }

    #[test]
    fn half_probability_gives_ln2() {
        let p = Tensor::<f64>::full(&[3, 6], 0.5);
        for labels in [Tensor::zeros(&[3, 6]), Tensor::full(&[3, 6], 1.0)] {
            let loss = bce_loss(&p, &labels).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn strictly_positive_off_target() {
        let p = Tensor::from_vec(&[1, 6], vec![0.3f64, 0.9, 0.2, 0.6, 0.01, 0.99]).unwrap();
        let y = Tensor::from_vec(&[1, 6], vec![1.0f64, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(bce_loss(&p, &y).unwrap() > 0.0);
    }

    #[test]
    fn non_binary_label_rejected() {
        let p = Tensor::<f32>::full(&[1, 6], 0.5);
        let y = Tensor::<f32>::full(&[1, 6], 0.5);
        assert!(matches!(bce_loss(&p, &y), Err(Error::Input(_))));
    }

    #[test]
    fn logit_gradient_matches_chain_rule() {
        let p = Tensor::from_vec(&[1, 3], vec![0.2f64, 0.7, 0.5]).unwrap();
        let y = Tensor::from_vec(&[1, 3], vec![1.0f64, 0.0, 1.0]).unwrap();
        let gp = bce_backward(&p, &y).unwrap();
        let gz = crate::ops::sigmoid_backward(&p, &gp).unwrap();
        let fused = bce_logits_backward(&p, &y).unwrap();
        for (a, b) in gz.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
