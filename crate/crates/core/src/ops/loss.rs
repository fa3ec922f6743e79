//! Per-frame softmax cross-entropy over class scores of shape (N, K+1, L).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax cross-entropy applied independently at every frame, averaged over
/// all N*L frames. Labels must be one-hot along the class axis. Returns the
/// scalar loss and its gradient with respect to the logits, which is
/// (softmax - label) / (N*L) per frame.
///
/// Logits are shifted by their per-frame maximum before exponentiation, so
/// arbitrarily large scores stay finite.
pub fn per_frame_softmax_loss(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!(
            "per-frame loss expects logits of rank 3 (N, classes, L), got {:?}",
            s
        )));
    }
    if labels.shape() != s {
        return Err(Error::Shape(format!(
            "labels shape {:?} does not match logits {:?}",
            labels.shape(),
            s
        )));
    }
    let (n, k1, l) = (s[0], s[1], s[2]);
    let frames = (n * l) as f64;
    let x = logits.data();
    let y = labels.data();
    let mut grad = Tensor::zeros(s);
    let g = grad.data_mut();
    let mut total = 0.0;

    for ni in 0..n {
        for t in 0..l {
            let col = |c: usize| ni * k1 * l + c * l + t;
            let mut true_class = None;
            for c in 0..k1 {
                let v = y[col(c)];
                if v == 1.0 {
                    if true_class.replace(c).is_some() {
                        return Err(Error::Invalid(format!(
                            "labels for sample {ni} frame {t} mark more than one class"
                        )));
                    }
                } else if v != 0.0 {
                    return Err(Error::Invalid(format!(
                        "labels for sample {ni} frame {t} contain {v}, expected one-hot 0/1"
                    )));
                }
            }
            let Some(true_class) = true_class else {
                return Err(Error::Invalid(format!(
                    "labels for sample {ni} frame {t} mark no class"
                )));
            };

            let mut max = f64::NEG_INFINITY;
            for c in 0..k1 {
                max = max.max(x[col(c)]);
            }
            let mut z = 0.0;
            for c in 0..k1 {
                z += (x[col(c)] - max).exp();
            }
            let log_z = z.ln();
            total += log_z - (x[col(true_class)] - max);
            for c in 0..k1 {
                let p = (x[col(c)] - max).exp() / z;
                g[col(c)] = (p - if c == true_class { 1.0 } else { 0.0 }) / frames;
            }
        }
    }
    Ok((total / frames, grad))
}
