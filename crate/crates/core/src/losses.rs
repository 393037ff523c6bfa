//! Swish activation and label-smoothed cross-entropy.

use crate::error::{ensure, Error, Result};

/// Default smoothing factor.
pub const DEFAULT_EPSILON: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `sigmoid(x) + x * sigmoid(x) * (1 - sigmoid(x))`.
pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Smoothed target distribution `q'(k) = (1 - eps) [k == k*] + eps / K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedLabelDistribution {
    pub epsilon: f64,
    pub true_class: usize,
    pub values: Vec<f64>,
}

impl SmoothedLabelDistribution {
    pub fn num_classes(&self) -> usize {
        self.values.len()
    }
}

pub fn smooth_labels(true_class: usize, num_classes: usize, epsilon: f64) -> Result<SmoothedLabelDistribution> {
    check_epsilon(epsilon)?;
    ensure!(
        num_classes >= 2,
        Error::InvalidArgument(format!("need at least two classes, got {num_classes}"))
    );
    ensure!(
        true_class < num_classes,
        Error::InvalidArgument(format!("class {true_class} outside 0..{num_classes}"))
    );
    let floor = epsilon / num_classes as f64;
    let mut values = vec![floor; num_classes];
    values[true_class] += 1.0 - epsilon;
    Ok(SmoothedLabelDistribution {
        epsilon,
        true_class,
        values,
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    ensure!(
        (0.0..1.0).contains(&epsilon),
        Error::InvalidArgument(format!("smoothing epsilon {epsilon} outside [0, 1)"))
    );
    Ok(())
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `-sum_k q'(k) log p(k)` with `p = softmax(logits)`.
pub fn smoothed_cross_entropy(logits: &[f64], true_class: usize, epsilon: f64) -> Result<f64> {
    Ok(smoothed_cross_entropy_with_grad(logits, true_class, epsilon)?.0)
}

/// Loss together with its gradient with respect to the logits, `p - q'`.
pub fn smoothed_cross_entropy_with_grad(logits: &[f64], true_class: usize, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    ensure!(
        logits.iter().all(|z| z.is_finite()),
        Error::InvalidArgument("logits must be finite".into())
    );
    let q = smooth_labels(true_class, logits.len(), epsilon)?;
    let log_p = log_softmax(logits);
    let loss = -q.values.iter().zip(&log_p).map(|(q, lp)| q * lp).sum::<f64>();
    let grad = log_p
        .iter()
        .zip(&q.values)
        .map(|(lp, q)| lp.exp() - q)
        .collect();
    Ok((loss, grad))
}
