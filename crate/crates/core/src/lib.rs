//! Temporal-preserving 3D convolutional networks for frame-level action
//! localization in video, together with the surrounding pipeline: synthetic
//! benchmark generation, training, score prediction, segment extraction, and
//! detection evaluation.
//!
//! The central idea: instead of downsampling time with strided pooling the way
//! a classic 3D ConvNet does, keep every layer at full temporal resolution and
//! widen its temporal view with dilated (atrous) kernels and dilated pooling
//! windows. The network then emits one class-score vector per input frame,
//! which downstream grouping turns into scored action segments.

pub mod arch;
pub mod cli;
pub mod error;
pub mod eval;
pub mod formats;
pub mod localize;
pub mod network;
pub mod ops;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
