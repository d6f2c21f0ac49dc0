//! Scalar objectives. Each returns the loss and its gradient with respect to
//! the prediction it was given.

use super::activation::softmax_f64;
use super::Tensor;
use crate::{Error, Result};

/// Softmax cross-entropy against a class index.
pub fn cross_entropy_loss(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let p = softmax_f64(logits.data());
    let loss = -p[target].max(1e-300).ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - if i == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// Elementwise Huber-style smooth L1, summed. Quadratic below `beta`.
pub fn smooth_l1_loss(pred: &[f32], target: &[f32], beta: f64) -> (f64, Vec<f32>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            if d.abs() < beta {
                loss += 0.5 * d * d / beta;
                (d / beta) as f32
            } else {
                loss += d.abs() - 0.5 * beta;
                d.signum() as f32
            }
        })
        .collect();
    (loss, grad)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary focal loss on one logit; returns `(loss, d loss / d logit)`.
///
/// `target` is 1 for a positive cell and 0 otherwise.
pub fn binary_focal(logit: f32, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let z = logit as f64;
    let p = 1.0 / (1.0 + (-z).exp());
    if positive {
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * log_p;
        let grad = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let grad = -(1.0 - alpha) * p.powf(gamma) * (gamma * (1.0 - p) * log_q - p);
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn focal_gradient_matches_difference() {
        for &z in &[-4.0f64, -0.7, 0.0, 0.4, 3.1] {
            for &pos in &[true, false] {
                let (_, g) = binary_focal(z as f32, pos, 0.25, 2.0);
                let num = fd(|x| {
                    // f64 reference of the same formula
                    let p = 1.0 / (1.0 + (-x).exp());
                    if pos {
                        -0.25 * (1.0 - p).powi(2) * p.ln()
                    } else {
                        -0.75 * p.powi(2) * (1.0 - p).ln()
                    }
                }, z);
                assert!((g - num).abs() < 1e-6, "z={z} pos={pos} {g} vs {num}");
            }
        }
    }

    #[test]
    fn focal_saturated_is_tiny() {
        assert!(binary_focal(20.0, true, 0.25, 2.0).0 < 1e-12);
        assert!(binary_focal(-20.0, false, 0.25, 2.0).0 < 1e-12);
        assert!(binary_focal(0.0, false, 0.25, 2.0).0 > 0.0);
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let z = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let (l, g) = cross_entropy_loss(&z, 1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] + 2.0 / 3.0).abs() < 1e-6);
        assert!(cross_entropy_loss(&z, 3).is_err());
    }

    #[test]
    fn smooth_l1_regions() {
        let (l, g) = smooth_l1_loss(&[0.0, 2.0], &[0.05, 0.0], 0.1);
        assert!((l - (0.5 * 0.0025 / 0.1 + 2.0 - 0.05)).abs() < 1e-7);
        assert!((g[0] + 0.5).abs() < 1e-6);
        assert_eq!(g[1], 1.0);
    }
}
