//! Scalar losses. Each returns the loss value together with its gradient
//! with respect to the prediction.

use crate::error::{bail, Result};
use crate::nn::real::{lit, Real};

fn check_len<T>(pred: &[T], target: &[T], what: &str) -> Result<()> {
    if pred.len() != target.len() {
        bail!(Shape, "{what}: prediction has {} elements, target {}", pred.len(), target.len());
    }
    if pred.is_empty() {
        bail!(Shape, "{what}: empty operands");
    }
    Ok(())
}

/// Mean Huber (smooth-L1) loss: `½e²` inside `|e| ≤ δ`, `δ(|e| − ½δ)` outside.
pub fn huber<T: Real>(pred: &[T], target: &[T], delta: f64) -> Result<(T, Vec<T>)> {
    check_len(pred, target, "huber")?;
    let delta = lit::<T>(delta);
    let half = lit::<T>(0.5);
    let inv_n = T::one() / T::from_usize(pred.len()).unwrap();
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let e = p - t;
        if e.abs() <= delta {
            total += half * e * e;
            grad.push(e * inv_n);
        } else {
            total += delta * (e.abs() - half * delta);
            grad.push(delta * e.signum() * inv_n);
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    check_len(pred, target, "mse")?;
    let inv_n = T::one() / T::from_usize(pred.len()).unwrap();
    let two = lit::<T>(2.0);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let e = p - t;
        total += e * e;
        grad.push(two * e * inv_n);
    }
    Ok((total * inv_n, grad))
}

/// Mean softmax cross-entropy over a `[batch × classes]` logit matrix.
///
/// The gradient is `(softmax(logits) − onehot) / batch`.
pub fn cross_entropy<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if classes == 0 || logits.len() != classes * labels.len() {
        bail!(Shape, "cross_entropy: {} logits for {} labels × {classes} classes", logits.len(), labels.len());
    }
    if labels.is_empty() {
        bail!(Shape, "cross_entropy: empty batch");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        bail!(Domain, "label {bad} outside [0, {classes})");
    }
    let inv_b = T::one() / T::from_usize(labels.len()).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let m = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
        let z: T = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[label];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - lse).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((total * inv_b, grad))
}
