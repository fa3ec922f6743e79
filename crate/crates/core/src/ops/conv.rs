//! Temporally dilated 3D convolution, forward and backward.
//!
//! The kernel samples the temporal axis with stride `temporal_dilation` (the
//! atrous rate); rate 1 is standard convolution. Spatial axes are never
//! dilated. Layout everywhere is (N, C, L, H, W), row-major.
//!
//! Compute goes through im2col plus a blocked matrix multiply: the receptive
//! field of every output position is unrolled into one column, so the whole
//! layer reduces to `weights (OC x IC*kT*kH*kW) . columns (IC*kT*kH*kW x
//! L'*H'*W')` per batch item. Parallelism only ever splits disjoint output
//! rows, never a summation axis, so results are identical across runs and
//! thread counts.

use matrixmultiply::dgemm;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of one convolutional layer.
///
/// `weights` has shape (out_channels, in_channels, kT, kH, kW), `bias` shape
/// (out_channels). Padding is zero-padding per axis; output frame t of a
/// temporally centered layer aligns with input frame t when
/// `padding.0 == temporal_dilation * (kT - 1) / 2` and the temporal stride is 1.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub temporal_dilation: usize,
    pub padding: (usize, usize, usize),
    pub stride: (usize, usize, usize),
}

impl ConvParams {
    pub fn new(
        weights: Tensor,
        bias: Tensor,
        temporal_dilation: usize,
        padding: (usize, usize, usize),
        stride: (usize, usize, usize),
    ) -> Result<Self> {
        if weights.rank() != 5 {
            return Err(Error::Shape(format!(
                "conv weights must be rank 5 (out,in,kT,kH,kW), got {:?}",
                weights.shape()
            )));
        }
        if bias.rank() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?} does not match out_channels {}",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        if temporal_dilation == 0 {
            return Err(Error::Invalid("temporal_dilation must be >= 1".into()));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::Invalid("conv strides must be >= 1".into()));
        }
        Ok(ConvParams {
            weights,
            bias,
            temporal_dilation,
            padding,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let s = self.weights.shape();
        (s[2], s[3], s[4])
    }

    /// Temporal extent of the dilated kernel in input frames.
    pub fn dilated_kt(&self) -> usize {
        let (kt, _, _) = self.kernel();
        self.temporal_dilation * (kt - 1) + 1
    }

    /// Centered "same" temporal padding: r * (kT - 1) / 2, rounded down.
    pub fn same_temporal_padding(kt: usize, dilation: usize) -> usize {
        dilation * (kt - 1) / 2
    }
}

fn out_extent(input: usize, pad: usize, eff_kernel: usize, stride: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < eff_kernel {
        return Err(Error::Shape(format!(
            "{axis} axis: padded extent {padded} smaller than effective kernel {eff_kernel}"
        )));
    }
    let out = (padded - eff_kernel) / stride + 1;
    if out == 0 {
        return Err(Error::Shape(format!("{axis} axis: zero-size output")));
    }
    Ok(out)
}

/// Output shape (N, C', L', H', W') of `conv3d_forward` for this input shape.
pub fn conv3d_output_shape(input: &[usize], params: &ConvParams) -> Result<[usize; 5]> {
    if input.len() != 5 {
        return Err(Error::Shape(format!(
            "conv input must be rank 5 (N,C,L,H,W), got {:?}",
            input
        )));
    }
    let (n, c, l, h, w) = (input[0], input[1], input[2], input[3], input[4]);
    if c != params.in_channels() {
        return Err(Error::Shape(format!(
            "input has {} channels, conv expects {}",
            c,
            params.in_channels()
        )));
    }
    let (kt, kh, kw) = params.kernel();
    let (pt, ph, pw) = params.padding;
    let (st, sh, sw) = params.stride;
    let ol = out_extent(l, pt, params.dilated_kt(), st, "temporal")?;
    let oh = out_extent(h, ph, kh, sh, "height")?;
    let ow = out_extent(w, pw, kw, sw, "width")?;
    let _ = kt;
    Ok([n, params.out_channels(), ol, oh, ow])
}

/// All the loop geometry of one convolution call, precomputed once.
#[derive(Clone, Copy)]
struct Geom {
    ic_n: usize,
    il: usize,
    ih_n: usize,
    iw_n: usize,
    ol: usize,
    ohn: usize,
    own: usize,
    kt_n: usize,
    kh_n: usize,
    kw_n: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    st: usize,
    sh: usize,
    sw: usize,
    r: usize,
}

impl Geom {
    fn new(input: &[usize], out: &[usize; 5], params: &ConvParams) -> Geom {
        let (kt_n, kh_n, kw_n) = params.kernel();
        Geom {
            ic_n: input[1],
            il: input[2],
            ih_n: input[3],
            iw_n: input[4],
            ol: out[2],
            ohn: out[3],
            own: out[4],
            kt_n,
            kh_n,
            kw_n,
            pt: params.padding.0,
            ph: params.padding.1,
            pw: params.padding.2,
            st: params.stride.0,
            sh: params.stride.1,
            sw: params.stride.2,
            r: params.temporal_dilation,
        }
    }

    /// Rows of the unrolled column matrix: IC * kT * kH * kW.
    fn ickk(&self) -> usize {
        self.ic_n * self.kt_n * self.kh_n * self.kw_n
    }

    /// Columns of the unrolled column matrix: one per output position.
    fn positions(&self) -> usize {
        self.ol * self.ohn * self.own
    }
}

/// Walk the contiguous runs where the column matrix maps to in-range input
/// positions: `f(col_start, in_start, len)` means column-matrix entries
/// `[col_start, col_start + len)` correspond to input entries
/// `[in_start, in_start + len)` of one batch item. Runs span output width at
/// unit width stride and single positions otherwise; padded positions are
/// never visited.
fn for_each_patch_run(g: &Geom, mut f: impl FnMut(usize, usize, usize)) {
    let plane = g.ih_n * g.iw_n;
    let mut row = 0;
    for ic in 0..g.ic_n {
        let in_c = ic * g.il * plane;
        for kt in 0..g.kt_n {
            for kh in 0..g.kh_n {
                for kw in 0..g.kw_n {
                    let col_base = row * g.positions();
                    for ot in 0..g.ol {
                        let it = (ot * g.st + g.r * kt) as isize - g.pt as isize;
                        if it < 0 || it >= g.il as isize {
                            continue;
                        }
                        let in_t = in_c + it as usize * plane;
                        let col_t = col_base + ot * g.ohn * g.own;
                        for oy in 0..g.ohn {
                            let ih = (oy * g.sh + kh) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.ih_n as isize {
                                continue;
                            }
                            let in_row = in_t + ih as usize * g.iw_n;
                            let col_row = col_t + oy * g.own;
                            if g.sw == 1 {
                                // valid ox: 0 <= ox + kw - pw < iw
                                let lo = g.pw.saturating_sub(kw);
                                let hi = (g.iw_n + g.pw - kw).min(g.own);
                                if lo < hi {
                                    let start = (in_row + lo + kw) - g.pw;
                                    f(col_row + lo, start, hi - lo);
                                }
                            } else {
                                for ox in 0..g.own {
                                    let ix = (ox * g.sw + kw) as isize - g.pw as isize;
                                    if ix >= 0 && (ix as usize) < g.iw_n {
                                        f(col_row + ox, in_row + ix as usize, 1);
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Unroll one batch item into the (IC*kT*kH*kW, L'*H'*W') column matrix.
/// Out-of-range (padded) positions stay zero.
fn im2col(in_n: &[f64], g: &Geom) -> Vec<f64> {
    let mut cols = vec![0.0; g.ickk() * g.positions()];
    for_each_patch_run(g, |col, inp, len| {
        cols[col..col + len].copy_from_slice(&in_n[inp..inp + len]);
    });
    cols
}

/// Adjoint of `im2col`: scatter-add a column-matrix gradient back onto the
/// input gradient of one batch item.
fn col2im_add(cols: &[f64], g: &Geom, gin_n: &mut [f64]) {
    for_each_patch_run(g, |col, inp, len| {
        for i in 0..len {
            gin_n[inp + i] += cols[col + i];
        }
    });
}

/// How many output channels one matrix-multiply task covers when the batch
/// alone cannot feed every core; small enough to give a four-core machine
/// work even at batch size one.
const OC_BLOCK: usize = 8;

/// Split output channels only when batch-level parallelism leaves cores idle;
/// otherwise one multiply per batch item packs the column matrix just once.
fn oc_block_for(batch: usize, oc_n: usize) -> usize {
    if batch >= rayon::current_num_threads() {
        oc_n
    } else {
        OC_BLOCK.min(oc_n)
    }
}

/// output[n,oc,t,y,x] = bias[oc]
///   + sum over ic,kt,kh,kw of input[n,ic, t*sT - pT + r*kt, y*sH - pH + kh, x*sW - pW + kw] * w[oc,ic,kt,kh,kw]
/// with out-of-range input positions contributing zero.
pub fn conv3d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let out_shape = conv3d_output_shape(input.shape(), params)?;
    let g = Geom::new(input.shape(), &out_shape, params);
    let n = out_shape[0];
    let oc_n = out_shape[1];
    let positions = g.positions();
    let ickk = g.ickk();
    let in_block = g.ic_n * g.il * g.ih_n * g.iw_n;

    let in_data = input.data();
    let w_data = params.weights.data();
    let b_data = params.bias.data();

    let cols_all: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| im2col(&in_data[ni * in_block..(ni + 1) * in_block], &g))
        .collect();

    let oc_block = oc_block_for(n, oc_n);
    let mut out = Tensor::zeros(&out_shape);
    out.data_mut()
        .par_chunks_mut(oc_n * positions)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let cols = &cols_all[ni];
            out_n
                .par_chunks_mut(oc_block * positions)
                .enumerate()
                .for_each(|(blk, c_block)| {
                    let oc_start = blk * oc_block;
                    let m = c_block.len() / positions;
                    for (i, row) in c_block.chunks_mut(positions).enumerate() {
                        row.fill(b_data[oc_start + i]);
                    }
                    // C (m x P) += W[oc_start..] (m x ICKK) . cols (ICKK x P)
                    unsafe {
                        dgemm(
                            m,
                            ickk,
                            positions,
                            1.0,
                            w_data[oc_start * ickk..].as_ptr(),
                            ickk as isize,
                            1,
                            cols.as_ptr(),
                            positions as isize,
                            1,
                            1.0,
                            c_block.as_mut_ptr(),
                            positions as isize,
                            1,
                        );
                    }
                });
        });
    Ok(out)
}

/// Exact adjoints of `conv3d_forward`.
pub fn conv3d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let out_shape = conv3d_output_shape(input.shape(), params)?;
    if grad_output.shape() != out_shape {
        return Err(Error::Shape(format!(
            "grad_output shape {:?} does not match forward output {:?}",
            grad_output.shape(),
            out_shape
        )));
    }
    let g = Geom::new(input.shape(), &out_shape, params);
    let [n, oc_n, ol, ohn, own] = out_shape;
    let positions = g.positions();
    let ickk = g.ickk();
    let in_block = g.ic_n * g.il * g.ih_n * g.iw_n;

    let in_data = input.data();
    let w_data = params.weights.data();
    let g_data = grad_output.data();

    // grad_bias[oc] = sum of grad_output over (n, t, y, x)
    let mut grad_bias = Tensor::zeros(&[oc_n]);
    for ni in 0..n {
        for oc in 0..oc_n {
            let base = (ni * oc_n + oc) * ol * ohn * own;
            let mut acc = 0.0;
            for v in &g_data[base..base + ol * ohn * own] {
                acc += v;
            }
            grad_bias.data_mut()[oc] += acc;
        }
    }

    // One task per batch item: rebuild its column matrix, push the output
    // gradient through both adjoints, and hand back this item's weight
    // gradient so the batch sum happens afterwards in index order.
    let mut grad_input = Tensor::zeros(input.shape());
    let per_item_gw: Vec<Vec<f64>> = grad_input
        .data_mut()
        .par_chunks_mut(in_block)
        .enumerate()
        .map(|(ni, gin_n)| {
            let cols = im2col(&in_data[ni * in_block..(ni + 1) * in_block], &g);
            let g_n = &g_data[ni * oc_n * positions..(ni + 1) * oc_n * positions];
            // grad_weights_n (OC x ICKK) = G_n (OC x P) . cols^T (P x ICKK)
            let mut gw_n = vec![0.0; oc_n * ickk];
            unsafe {
                dgemm(
                    oc_n,
                    positions,
                    ickk,
                    1.0,
                    g_n.as_ptr(),
                    positions as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    positions as isize,
                    0.0,
                    gw_n.as_mut_ptr(),
                    ickk as isize,
                    1,
                );
            }
            // grad_cols (ICKK x P) = W^T (ICKK x OC) . G_n (OC x P)
            let mut grad_cols = vec![0.0; ickk * positions];
            unsafe {
                dgemm(
                    ickk,
                    oc_n,
                    positions,
                    1.0,
                    w_data.as_ptr(),
                    1,
                    ickk as isize,
                    g_n.as_ptr(),
                    positions as isize,
                    1,
                    0.0,
                    grad_cols.as_mut_ptr(),
                    positions as isize,
                    1,
                );
            }
            col2im_add(&grad_cols, &g, gin_n);
            gw_n
        })
        .collect();

    let mut grad_weights = Tensor::zeros(params.weights.shape());
    for gw_n in &per_item_gw {
        for (d, s) in grad_weights.data_mut().iter_mut().zip(gw_n) {
            *d += s;
        }
    }

    Ok((grad_input, grad_weights, grad_bias))
}
