//! Differentiable building blocks: convolution, pooling, activation, loss,
//! and temporal interpolation. All operate on [`crate::tensor::Tensor`] in
//! (N, C, L, H, W) layout (or reductions of it) and come in forward/backward
//! pairs whose adjoints are exact.

mod conv;
mod gap;
mod interp;
mod loss;
mod pool;
mod relu;

pub use conv::{conv3d_backward, conv3d_forward, conv3d_output_shape, ConvParams};
pub use gap::{spatial_gap_backward, spatial_gap_forward};
pub use interp::{upsample_sequence, upsample_temporal_backward, upsample_temporal_forward};
pub use loss::per_frame_softmax_loss;
pub use pool::{maxpool3d_backward, maxpool3d_forward, maxpool3d_output_shape, PoolParams};
pub use relu::{relu_backward, relu_forward};
