//! Softmax cross-entropy classification loss.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Numerically stable per-row softmax of `(B, Y, 1, 1)` logits.
pub fn softmax(logits: &FeatureMap) -> FeatureMap {
    let [b_n, y_n, _, _] = logits.shape();
    let z = logits.data();
    let mut out = vec![0.0f64; z.len()];
    for b in 0..b_n {
        let row = &z[b * y_n..(b + 1) * y_n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[b * y_n + i] = e;
            sum += e;
        }
        for v in &mut out[b * y_n..(b + 1) * y_n] {
            *v /= sum;
        }
    }
    FeatureMap::new(logits.shape(), out).expect("shape preserved")
}

/// Mean negative log-softmax of the true class.
///
/// Returns the scalar loss and its gradient w.r.t. the logits,
/// `(softmax - onehot) / B`.
pub fn cross_entropy_loss(logits: &FeatureMap, labels: &[usize]) -> Result<(f64, FeatureMap)> {
    let [b_n, y_n, _, _] = logits.shape();
    if labels.len() != b_n {
        return Err(Error::ShapeMismatch {
            expected: format!("{b_n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    for &y in labels {
        if y >= y_n {
            return Err(Error::InvalidLabel {
                label: y,
                classes: y_n,
            });
        }
    }

    let z = logits.data();
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    let inv_b = 1.0 / b_n as f64;
    for (b, &y) in labels.iter().enumerate() {
        let row = &z[b * y_n..(b + 1) * y_n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
        loss += lse - row[y];
    }
    loss *= inv_b;

    let g = grad.data_mut();
    for (b, &y) in labels.iter().enumerate() {
        g[b * y_n + y] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v *= inv_b);

    Ok((loss, grad))
}

/// Mean squared error between logits and stored target logits, with
/// gradient `2 (z - target) / (B * Y)`.
pub fn mse_logits_loss(logits: &FeatureMap, target: &[f64]) -> Result<(f64, FeatureMap)> {
    if logits.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} target values", logits.len()),
            got: format!("{}", target.len()),
        });
    }
    let n = logits.len() as f64;
    let mut grad = vec![0.0f64; logits.len()];
    let mut loss = 0.0;
    for (i, (&z, &t)) in logits.data().iter().zip(target).enumerate() {
        let d = z - t;
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, FeatureMap::new(logits.shape(), grad)?))
}
