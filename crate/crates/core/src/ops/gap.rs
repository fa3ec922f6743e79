//! Spatial global average pooling: mean over H and W per (sample, channel, frame).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// (N, C, L, H, W) -> (N, C, L, 1, 1), each output the spatial mean.
pub fn spatial_gap_forward(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!(
            "spatial gap input must be rank 5, got {:?}",
            s
        )));
    }
    let (n, c, l, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c, l, 1, 1]);
    let data = input.data();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let base = i * plane;
        let mut acc = 0.0;
        for v in &data[base..base + plane] {
            acc += v;
        }
        *o = acc / plane as f64;
    }
    Ok(out)
}

/// Spread each output gradient uniformly over its H*W inputs.
pub fn spatial_gap_backward(input_shape: &[usize], grad_output: &Tensor) -> Result<Tensor> {
    if input_shape.len() != 5 {
        return Err(Error::Shape(format!(
            "spatial gap input shape must be rank 5, got {:?}",
            input_shape
        )));
    }
    let expect = [input_shape[0], input_shape[1], input_shape[2], 1, 1];
    if grad_output.shape() != expect {
        return Err(Error::Shape(format!(
            "spatial gap grad_output shape {:?}, expected {:?}",
            grad_output.shape(),
            expect
        )));
    }
    let plane = input_shape[3] * input_shape[4];
    let mut grad = Tensor::zeros(input_shape);
    let gin = grad.data_mut();
    for (i, &g) in grad_output.data().iter().enumerate() {
        let share = g / plane as f64;
        for v in &mut gin[i * plane..(i + 1) * plane] {
            *v = share;
        }
    }
    Ok(grad)
}
