//! Declarative network architecture: layer specs, shape and receptive-field
//! inference, and the mini-scale presets.
//!
//! The preset family is generated from one reference stack (a C3D-style
//! five-stage network that halves the temporal axis at pools 2-5) by choosing
//! which of those pools keep temporal stride 1 instead. Every layer after a
//! preserved pool then samples time more densely than the reference did, so
//! its temporal rate (convolution atrous rate, or pooling window dilation) is
//! raised by exactly the missing downsampling factor:
//!
//! ```text
//! rate = reference cumulative stride at this layer
//!      / actual cumulative stride at this layer
//! ```
//!
//! This keeps the temporal receptive field of every layer, measured in input
//! frames, identical across all presets while the temporal resolution varies.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// One layer of a network. Kernels, strides, and paddings are (T, H, W).
/// `temporal_rate` is the atrous sampling rate of a convolution kernel or the
/// window dilation of a pool; spatial axes are never dilated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: [usize; 3],
        temporal_rate: usize,
        padding: [usize; 3],
        stride: [usize; 3],
        activation: Activation,
    },
    Pool {
        name: String,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        temporal_rate: usize,
    },
    Gap {
        name: String,
    },
    /// Final convolution producing one score per class per frame; always
    /// kernel-centered, stride 1, linear activation, K+1 output channels.
    Classifier {
        name: String,
        kernel: [usize; 3],
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Pool { name, .. }
            | LayerSpec::Gap { name }
            | LayerSpec::Classifier { name, .. } => name,
        }
    }

    /// (temporal kernel, temporal rate, temporal stride) for receptive-field
    /// arithmetic; identity for layers that do not look across frames.
    fn temporal_geometry(&self) -> (usize, usize, usize) {
        match self {
            LayerSpec::Conv {
                kernel,
                temporal_rate,
                stride,
                ..
            } => (kernel[0], *temporal_rate, stride[0]),
            LayerSpec::Pool {
                kernel,
                temporal_rate,
                stride,
                ..
            } => (kernel[0], *temporal_rate, stride[0]),
            LayerSpec::Gap { .. } => (1, 1, 1),
            LayerSpec::Classifier { kernel, .. } => (kernel[0], 1, 1),
        }
    }
}

/// A complete architecture: input geometry plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub num_classes: usize,
    /// Input shape as (C, L, H, W); batch is implicit.
    pub input_shape: [usize; 4],
    /// Factor by which predicted per-frame scores must be upsampled to get
    /// back to input frame rate (1 for fully preserving presets).
    pub score_upsample_factor: usize,
    pub layers: Vec<LayerSpec>,
}

/// Temporal receptive field of a layer, measured on the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub extent_frames: usize,
    pub stride_frames: usize,
}

impl NetworkSpec {
    /// Output shape (C, L, H, W) of every layer, in order.
    ///
    /// Fails, naming the layer, if any axis would collapse to zero or a
    /// channel count mismatches.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 4]>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape;
        for layer in &self.layers {
            cur = self.layer_output_shape(layer, cur)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    fn layer_output_shape(&self, layer: &LayerSpec, input: [usize; 4]) -> Result<[usize; 4]> {
        let reduce = |extent: usize, pad: usize, eff_k: usize, stride: usize| -> Option<usize> {
            let padded = extent + 2 * pad;
            if padded < eff_k {
                return None;
            }
            match (padded - eff_k) / stride + 1 {
                0 => None,
                o => Some(o),
            }
        };
        let out = match layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                temporal_rate,
                padding,
                stride,
                ..
            } => {
                let eff_kt = temporal_rate * (kernel[0] - 1) + 1;
                let l = reduce(input[1], padding[0], eff_kt, stride[0]);
                let h = reduce(input[2], padding[1], kernel[1], stride[1]);
                let w = reduce(input[3], padding[2], kernel[2], stride[2]);
                match (l, h, w) {
                    (Some(l), Some(h), Some(w)) => Some([*out_channels, l, h, w]),
                    _ => None,
                }
            }
            LayerSpec::Pool {
                kernel,
                stride,
                padding,
                temporal_rate,
                ..
            } => {
                let eff_kt = temporal_rate * (kernel[0] - 1) + 1;
                let l = reduce(input[1], padding[0], eff_kt, stride[0]);
                let h = reduce(input[2], padding[1], kernel[1], stride[1]);
                let w = reduce(input[3], padding[2], kernel[2], stride[2]);
                match (l, h, w) {
                    (Some(l), Some(h), Some(w)) => Some([input[0], l, h, w]),
                    _ => None,
                }
            }
            LayerSpec::Gap { .. } => Some([input[0], input[1], 1, 1]),
            LayerSpec::Classifier { kernel, .. } => {
                let l = reduce(input[1], kernel[0] / 2, kernel[0], 1);
                let h = reduce(input[2], 0, kernel[1], 1);
                let w = reduce(input[3], 0, kernel[2], 1);
                match (l, h, w) {
                    (Some(l), Some(h), Some(w)) => Some([self.num_classes + 1, l, h, w]),
                    _ => None,
                }
            }
        };
        out.ok_or_else(|| {
            Error::Shape(format!(
                "layer {} collapses input shape {:?} to a non-positive axis",
                layer.name(),
                input
            ))
        })
    }

    /// Receptive field of the layer at `layer_index` on the input, by the
    /// standard accumulation: extent grows by (k-1) * rate * stride-so-far,
    /// stride multiplies by the layer's own stride.
    pub fn temporal_receptive_field(&self, layer_index: usize) -> Result<ReceptiveField> {
        if layer_index >= self.layers.len() {
            return Err(Error::Invalid(format!(
                "layer index {layer_index} out of range ({} layers)",
                self.layers.len()
            )));
        }
        let mut rf = ReceptiveField {
            extent_frames: 1,
            stride_frames: 1,
        };
        for layer in &self.layers[..=layer_index] {
            let (k, r, s) = layer.temporal_geometry();
            rf.extent_frames += (k - 1) * r * rf.stride_frames;
            rf.stride_frames *= s;
        }
        Ok(rf)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    /// Total number of learnable scalars (conv weights and biases).
    pub fn parameter_count(&self) -> Result<usize> {
        let mut channels = self.input_shape[0];
        let mut total = 0usize;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    total += out_channels * channels * kernel[0] * kernel[1] * kernel[2]
                        + out_channels;
                    channels = *out_channels;
                }
                LayerSpec::Classifier { kernel, .. } => {
                    let out = self.num_classes + 1;
                    total += out * channels * kernel[0] * kernel[1] * kernel[2] + out;
                    channels = out;
                }
                LayerSpec::Pool { .. } | LayerSpec::Gap { .. } => {}
            }
        }
        Ok(total)
    }

    /// Serialize to the TOML configuration format.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serializing spec: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("parsing spec: {e}")))?;
        spec.infer_shapes()?;
        Ok(spec)
    }

    /// Hex digest of the serialized spec; checkpoints store it so parameters
    /// are never loaded into a structurally different network.
    pub fn digest(&self) -> Result<String> {
        let toml = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(toml.as_bytes());
        let mut out = String::new();
        for b in hasher.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        Ok(out)
    }
}

/// Geometry knobs for the desk-scale presets.
#[derive(Debug, Clone, Copy)]
pub struct MiniScale {
    pub input_channels: usize,
    pub input_length: usize,
    pub input_spatial: usize,
    pub stage_widths: [usize; 5],
    pub head_width: usize,
}

impl Default for MiniScale {
    fn default() -> Self {
        MiniScale {
            input_channels: 1,
            input_length: 32,
            input_spatial: 32,
            stage_widths: [8, 16, 32, 32, 32],
            head_width: 64,
        }
    }
}

pub const PRESET_NAMES: [&str; 9] = [
    "c3d-mini",
    "tpc-mini",
    "tpc-2",
    "tpc-3",
    "tpc-4",
    "tpc-23",
    "tpc-34",
    "tpc-gap-mini",
    "interp-baseline",
];

/// Build one of the named presets for a K-class problem (plus background).
pub fn build_preset(name: &str, num_classes: usize, scale: MiniScale) -> Result<NetworkSpec> {
    if num_classes == 0 {
        return Err(Error::Invalid("num_classes must be >= 1".into()));
    }
    // Pools (2..=5) whose temporal stride drops from 2 to 1 in this preset.
    let preserved: &[usize] = match name {
        "c3d-mini" | "interp-baseline" => &[],
        "tpc-mini" | "tpc-gap-mini" => &[2, 3, 4, 5],
        "tpc-2" => &[2],
        "tpc-3" => &[3],
        "tpc-4" => &[4],
        "tpc-23" => &[2, 3],
        "tpc-34" => &[3, 4],
        _ => {
            return Err(Error::Invalid(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    let gap_head = name == "tpc-gap-mini";

    let mut layers = Vec::new();
    let mut actual_stride = 1usize; // cumulative temporal stride so far
    let mut reference_stride = 1usize; // same quantity in the reference stack
    let rate_for = |reference: usize, actual: usize| -> Result<usize> {
        if reference % actual != 0 {
            return Err(Error::Invalid(format!(
                "cumulative stride {actual} does not divide reference stride {reference}"
            )));
        }
        Ok(reference / actual)
    };

    let conv = |layers: &mut Vec<LayerSpec>, name: &str, out: usize, rate: usize| {
        layers.push(LayerSpec::Conv {
            name: name.into(),
            out_channels: out,
            kernel: [3, 3, 3],
            temporal_rate: rate,
            padding: [rate, 1, 1],
            stride: [1, 1, 1],
            activation: Activation::Relu,
        });
    };

    conv(&mut layers, "conv1a", scale.stage_widths[0], 1);
    layers.push(LayerSpec::Pool {
        name: "pool1".into(),
        kernel: [1, 2, 2],
        stride: [1, 2, 2],
        padding: [0, 0, 0],
        temporal_rate: 1,
    });
    conv(&mut layers, "conv2a", scale.stage_widths[1], 1);

    for stage in 2..=5usize {
        // pool at the tail of stage `stage`; spatial downsampling stops once
        // the map reaches the head kernel size (pools 4 and 5 keep H, W).
        let temporal_stride = if preserved.contains(&stage) { 1 } else { 2 };
        let spatial_stride = if stage <= 3 { 2 } else { 1 };
        let dilation = rate_for(reference_stride, actual_stride)?;
        layers.push(LayerSpec::Pool {
            name: format!("pool{stage}"),
            kernel: [3, 3, 3],
            stride: [temporal_stride, spatial_stride, spatial_stride],
            padding: [dilation, 1, 1],
            temporal_rate: dilation,
        });
        actual_stride *= temporal_stride;
        reference_stride *= 2;

        if stage < 5 {
            let width = scale.stage_widths[stage];
            let rate = rate_for(reference_stride, actual_stride)?;
            conv(&mut layers, &format!("conv{}a", stage + 1), width, rate);
            conv(&mut layers, &format!("conv{}b", stage + 1), width, rate);
        }
    }

    let mut spec = NetworkSpec {
        name: name.into(),
        num_classes,
        input_shape: [
            scale.input_channels,
            scale.input_length,
            scale.input_spatial,
            scale.input_spatial,
        ],
        // a preset whose stack still downsamples by `actual_stride` needs its
        // scores stretched by that factor to reach frame rate
        score_upsample_factor: actual_stride,
        layers,
    };

    if gap_head {
        spec.layers.push(LayerSpec::Gap {
            name: "gap".into(),
        });
        spec.layers.push(LayerSpec::Classifier {
            name: "classifier".into(),
            kernel: [1, 1, 1],
        });
        spec.infer_shapes()?;
        Ok(spec)
    } else {
        fc_to_conv_head(spec, scale.head_width, (4, 4))
    }
}

/// Append the sliding per-frame head that replaces the reference network's
/// fully connected layers: a convolution whose kernel covers the entire final
/// spatial map (so each frame collapses to a feature vector), a pointwise
/// mixing convolution, and the classifier.
///
/// Fails if the backbone's final spatial size is not `head_spatial`.
pub fn fc_to_conv_head(
    mut spec: NetworkSpec,
    head_width: usize,
    head_spatial: (usize, usize),
) -> Result<NetworkSpec> {
    let shapes = spec.infer_shapes()?;
    let last = shapes
        .last()
        .ok_or_else(|| Error::Invalid("cannot attach a head to an empty network".into()))?;
    if (last[2], last[3]) != head_spatial {
        return Err(Error::Shape(format!(
            "backbone ends with spatial size {}x{} but the head kernel covers {}x{}",
            last[2], last[3], head_spatial.0, head_spatial.1
        )));
    }
    spec.layers.push(LayerSpec::Conv {
        name: "conv6".into(),
        out_channels: head_width,
        kernel: [1, head_spatial.0, head_spatial.1],
        temporal_rate: 1,
        padding: [0, 0, 0],
        stride: [1, 1, 1],
        activation: Activation::Relu,
    });
    spec.layers.push(LayerSpec::Conv {
        name: "conv7".into(),
        out_channels: head_width,
        kernel: [1, 1, 1],
        temporal_rate: 1,
        padding: [0, 0, 0],
        stride: [1, 1, 1],
        activation: Activation::Relu,
    });
    spec.layers.push(LayerSpec::Classifier {
        name: "classifier".into(),
        kernel: [1, 1, 1],
    });
    spec.infer_shapes()?;
    Ok(spec)
}
