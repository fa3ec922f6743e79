//! 3D max pooling with optional temporal window dilation.
//!
//! Padding positions behave as negative infinity, so they never win the max.
//! The forward pass records the flat input index of each selected maximum;
//! backward routes each output gradient to exactly that position. Ties resolve
//! to the lowest flat index because the window scan only replaces the current
//! maximum on a strictly greater value.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one max-pooling layer.
///
/// `temporal_dilation` spaces the temporal taps of the window the same way a
/// dilated convolution spaces its kernel taps; spatial taps are never dilated.
#[derive(Debug, Clone)]
pub struct PoolParams {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub temporal_dilation: usize,
}

impl PoolParams {
    pub fn new(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
        temporal_dilation: usize,
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || kernel.2 == 0 {
            return Err(Error::Invalid("pool kernel dims must be >= 1".into()));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::Invalid("pool strides must be >= 1".into()));
        }
        if temporal_dilation == 0 {
            return Err(Error::Invalid("pool temporal_dilation must be >= 1".into()));
        }
        Ok(PoolParams {
            kernel,
            stride,
            padding,
            temporal_dilation,
        })
    }

    /// Temporal extent of the dilated window in input frames.
    pub fn dilated_kt(&self) -> usize {
        self.temporal_dilation * (self.kernel.0 - 1) + 1
    }
}

/// Output shape (N, C, L', H', W') of `maxpool3d_forward` for this input shape.
pub fn maxpool3d_output_shape(input: &[usize], params: &PoolParams) -> Result<[usize; 5]> {
    if input.len() != 5 {
        return Err(Error::Shape(format!(
            "pool input must be rank 5 (N,C,L,H,W), got {:?}",
            input
        )));
    }
    let dims = [
        (input[2], params.padding.0, params.dilated_kt(), params.stride.0, "temporal"),
        (input[3], params.padding.1, params.kernel.1, params.stride.1, "height"),
        (input[4], params.padding.2, params.kernel.2, params.stride.2, "width"),
    ];
    let mut out = [input[0], input[1], 0, 0, 0];
    for (i, &(extent, pad, eff_k, stride, axis)) in dims.iter().enumerate() {
        let padded = extent + 2 * pad;
        if padded < eff_k {
            return Err(Error::Shape(format!(
                "{axis} axis: padded extent {padded} smaller than pooling window {eff_k}"
            )));
        }
        let o = (padded - eff_k) / stride + 1;
        if o == 0 {
            return Err(Error::Shape(format!("{axis} axis: zero-size pool output")));
        }
        out[2 + i] = o;
    }
    Ok(out)
}

/// Returns the pooled tensor and, per output element, the flat index into the
/// input buffer of the maximum it selected.
pub fn maxpool3d_forward(input: &Tensor, params: &PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = maxpool3d_output_shape(input.shape(), params)?;
    let [_, _, ol, ohn, own] = out_shape;
    let ish = input.shape();
    let (il, ih_n, iw_n) = (ish[2], ish[3], ish[4]);
    let (kt_n, kh_n, kw_n) = params.kernel;
    let (st, sh, sw) = params.stride;
    let (pt, ph, pw) = params.padding;
    let d = params.temporal_dilation;

    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; out.len()];
    let in_data = input.data();
    let block = ol * ohn * own;

    let failed = std::sync::atomic::AtomicBool::new(false);
    out.data_mut()
        .par_chunks_mut(block)
        .zip(argmax.par_chunks_mut(block))
        .enumerate()
        .for_each(|(plane, (out_plane, arg_plane))| {
            let in_base = plane * il * ih_n * iw_n; // plane = n*C + c, same layout both sides
            for ot in 0..ol {
                for oy in 0..ohn {
                    for ox in 0..own {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for kt in 0..kt_n {
                            let it = (ot * st + d * kt) as isize - pt as isize;
                            if it < 0 || it >= il as isize {
                                continue;
                            }
                            for kh in 0..kh_n {
                                let ih = (oy * sh + kh) as isize - ph as isize;
                                if ih < 0 || ih >= ih_n as isize {
                                    continue;
                                }
                                for kw in 0..kw_n {
                                    let iw = (ox * sw + kw) as isize - pw as isize;
                                    if iw < 0 || iw >= iw_n as isize {
                                        continue;
                                    }
                                    let idx = in_base
                                        + it as usize * ih_n * iw_n
                                        + ih as usize * iw_n
                                        + iw as usize;
                                    let v = in_data[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        if best_idx == usize::MAX {
                            failed.store(true, std::sync::atomic::Ordering::Relaxed);
                            return;
                        }
                        let o = ot * ohn * own + oy * own + ox;
                        out_plane[o] = best;
                        arg_plane[o] = best_idx;
                    }
                }
            }
        });
    if failed.load(std::sync::atomic::Ordering::Relaxed) {
        return Err(Error::Invalid(
            "pooling window contained only padding; reduce padding or window dilation".into(),
        ));
    }
    Ok((out, argmax))
}

/// Scatter each output gradient back to the input position recorded in
/// `argmax`. `input_shape` must be the shape the forward pass pooled.
pub fn maxpool3d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_output: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_output.len() {
        return Err(Error::Shape(format!(
            "argmax has {} entries but grad_output has {}",
            argmax.len(),
            grad_output.len()
        )));
    }
    let mut grad_input = Tensor::zeros(input_shape);
    let gin = grad_input.data_mut();
    let len = gin.len();
    for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
        let slot = gin.get_mut(idx).ok_or_else(|| {
            Error::Invalid(format!(
                "argmax index {idx} out of range for input of {len} elements; \
                 indices were recorded for a different input shape"
            ))
        })?;
        *slot += g;
    }
    Ok(grad_input)
}
