//! Linear temporal upsampling with endpoint alignment.
//!
//! Output position i samples the input at i * (L_in - 1) / (L_out - 1), so the
//! first and last frames map exactly onto the input endpoints and interior
//! frames blend their two neighbours. Used both to stretch reduced-resolution
//! score sequences back to frame rate and, differentiably, inside training.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source position and blend weight for each output index.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, f64)> {
    (0..out_len)
        .map(|i| {
            if in_len == 1 || out_len == 1 {
                return (0, 0.0);
            }
            let src = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let mut j = src.floor() as usize;
            if j >= in_len - 1 {
                j = in_len - 2; // keep j+1 in range; weight becomes exactly 1 at the end
            }
            (j, src - j as f64)
        })
        .collect()
}

/// Upsample one sequence by an integer factor.
pub fn upsample_sequence(input: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    if input.is_empty() {
        return Err(Error::Invalid("cannot upsample an empty sequence".into()));
    }
    let out_len = input.len() * factor;
    Ok(taps(input.len(), out_len)
        .into_iter()
        .map(|(j, w)| {
            if w == 0.0 {
                input[j]
            } else {
                (1.0 - w) * input[j] + w * input[j + 1]
            }
        })
        .collect())
}

/// (N, C, L) -> (N, C, L * factor) along the last axis.
pub fn upsample_temporal_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!(
            "temporal upsample expects rank 3 (N, C, L), got {:?}",
            s
        )));
    }
    let (n, c, l) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[n, c, l * factor.max(1)]);
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    for row in 0..n * c {
        let src = &input.data()[row * l..(row + 1) * l];
        let up = upsample_sequence(src, factor)?;
        out.data_mut()[row * l * factor..(row + 1) * l * factor].copy_from_slice(&up);
    }
    Ok(out)
}

/// Exact adjoint of `upsample_temporal_forward`: each output gradient flows to
/// the one or two input frames it interpolated, weighted the same way.
pub fn upsample_temporal_backward(
    input_shape: &[usize],
    factor: usize,
    grad_output: &Tensor,
) -> Result<Tensor> {
    if input_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "temporal upsample input shape must be rank 3, got {:?}",
            input_shape
        )));
    }
    if factor == 0 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    let (n, c, l) = (input_shape[0], input_shape[1], input_shape[2]);
    let expect = [n, c, l * factor];
    if grad_output.shape() != expect {
        return Err(Error::Shape(format!(
            "upsample grad_output shape {:?}, expected {:?}",
            grad_output.shape(),
            expect
        )));
    }
    let tap = taps(l, l * factor);
    let mut grad = Tensor::zeros(input_shape);
    let gin = grad.data_mut();
    let gout = grad_output.data();
    for row in 0..n * c {
        let in_base = row * l;
        let out_base = row * l * factor;
        for (i, &(j, w)) in tap.iter().enumerate() {
            let g = gout[out_base + i];
            gin[in_base + j] += (1.0 - w) * g;
            if w != 0.0 {
                gin[in_base + j + 1] += w * g;
            }
        }
    }
    Ok(grad)
}
