//! Network runtime: parameter storage, initialization, forward/backward over
//! a whole layer stack, and parameter persistence for checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Activation, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::ops::{
    conv3d_backward, conv3d_forward, maxpool3d_backward, maxpool3d_forward, relu_backward,
    relu_forward, spatial_gap_backward, spatial_gap_forward, ConvParams, PoolParams,
};
use crate::tensor::Tensor;

/// Learnable state of one layer; pooling and averaging layers own nothing.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv { weights: Tensor, bias: Tensor },
    Stateless,
}

/// A spec instantiated with parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<LayerParams>,
}

/// Everything the backward pass needs from one forward pass: the input, each
/// layer's post-activation output, and each pool's winner indices.
pub struct ForwardCache {
    input: Tensor,
    outputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

/// Per-layer parameter gradients, aligned with the layer list.
pub struct Gradients(pub Vec<Option<LayerGrads>>);

pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// (out_channels, in_channels, kT, kH, kW) of the conv or classifier layer at
/// `index`, given `in_channels` flowing into it.
fn conv_weight_shape(spec: &NetworkSpec, index: usize, in_channels: usize) -> Option<[usize; 5]> {
    match &spec.layers[index] {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => Some([*out_channels, in_channels, kernel[0], kernel[1], kernel[2]]),
        LayerSpec::Classifier { kernel, .. } => Some([
            spec.num_classes + 1,
            in_channels,
            kernel[0],
            kernel[1],
            kernel[2],
        ]),
        _ => None,
    }
}

impl Network {
    /// Initialize parameters with uniform draws in ±sqrt(6 / (fan_in +
    /// fan_out)) and zero biases, in fixed layer order from a seeded
    /// generator, so the same seed always produces the same network.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Network> {
        spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input_shape[0];
        let mut params = Vec::with_capacity(spec.layers.len());
        for i in 0..spec.layers.len() {
            match conv_weight_shape(&spec, i, channels) {
                Some(wshape) => {
                    let [out_c, in_c, kt, kh, kw] = wshape;
                    let fan_in = in_c * kt * kh * kw;
                    let fan_out = out_c * kt * kh * kw;
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let weights =
                        Tensor::from_fn(&wshape, |_| rng.gen_range(-bound..bound));
                    params.push(LayerParams::Conv {
                        weights,
                        bias: Tensor::zeros(&[out_c]),
                    });
                    channels = out_c;
                }
                None => params.push(LayerParams::Stateless),
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weights, bias } => weights.len() + bias.len(),
                LayerParams::Stateless => 0,
            })
            .sum()
    }

    fn conv_params(&self, index: usize) -> Result<ConvParams> {
        let (weights, bias) = match &self.params[index] {
            LayerParams::Conv { weights, bias } => (weights.clone(), bias.clone()),
            LayerParams::Stateless => {
                return Err(Error::Invalid(format!(
                    "layer {} has no parameters",
                    self.spec.layers[index].name()
                )))
            }
        };
        match &self.spec.layers[index] {
            LayerSpec::Conv {
                temporal_rate,
                padding,
                stride,
                ..
            } => ConvParams::new(
                weights,
                bias,
                *temporal_rate,
                (padding[0], padding[1], padding[2]),
                (stride[0], stride[1], stride[2]),
            ),
            LayerSpec::Classifier { kernel, .. } => ConvParams::new(
                weights,
                bias,
                1,
                (kernel[0] / 2, 0, 0),
                (1, 1, 1),
            ),
            other => Err(Error::Invalid(format!(
                "layer {} is not convolutional",
                other.name()
            ))),
        }
    }

    fn pool_params(&self, index: usize) -> Result<PoolParams> {
        match &self.spec.layers[index] {
            LayerSpec::Pool {
                kernel,
                stride,
                padding,
                temporal_rate,
                ..
            } => PoolParams::new(
                (kernel[0], kernel[1], kernel[2]),
                (stride[0], stride[1], stride[2]),
                (padding[0], padding[1], padding[2]),
                *temporal_rate,
            ),
            other => Err(Error::Invalid(format!(
                "layer {} is not a pool",
                other.name()
            ))),
        }
    }

    /// Run the stack on a batch (N, C, L, H, W), keeping what backward needs.
    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut outputs = Vec::with_capacity(self.params.len());
        let mut argmax = Vec::with_capacity(self.params.len());
        let mut cur = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { activation, .. } => {
                    let p = self.conv_params(i)?;
                    let mut out = conv3d_forward(&cur, &p)?;
                    if *activation == Activation::Relu {
                        out = relu_forward(&out);
                    }
                    argmax.push(None);
                    cur = out;
                }
                LayerSpec::Classifier { .. } => {
                    let p = self.conv_params(i)?;
                    let out = conv3d_forward(&cur, &p)?;
                    argmax.push(None);
                    cur = out;
                }
                LayerSpec::Pool { .. } => {
                    let p = self.pool_params(i)?;
                    let (out, arg) = maxpool3d_forward(&cur, &p)?;
                    argmax.push(Some(arg));
                    cur = out;
                }
                LayerSpec::Gap { .. } => {
                    let out = spatial_gap_forward(&cur)?;
                    argmax.push(None);
                    cur = out;
                }
            }
            outputs.push(cur.clone());
        }
        Ok((
            cur,
            ForwardCache {
                input: input.clone(),
                outputs,
                argmax,
            },
        ))
    }

    /// Forward without caching, for inference.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { activation, .. } => {
                    let out = conv3d_forward(&cur, &self.conv_params(i)?)?;
                    if *activation == Activation::Relu {
                        relu_forward(&out)
                    } else {
                        out
                    }
                }
                LayerSpec::Classifier { .. } => conv3d_forward(&cur, &self.conv_params(i)?)?,
                LayerSpec::Pool { .. } => maxpool3d_forward(&cur, &self.pool_params(i)?)?.0,
                LayerSpec::Gap { .. } => spatial_gap_forward(&cur)?,
            };
        }
        Ok(cur)
    }

    /// Class scores per frame: forward plus a squeeze of the trailing 1x1
    /// spatial axes, (N, C, L, 1, 1) -> (N, K+1, L).
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        squeeze_scores(out)
    }

    /// Backpropagate `grad_output` (shaped like the final layer's output)
    /// through the cached pass. Returns parameter gradients per layer.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Gradients> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<LayerGrads>> = (0..n).map(|_| None).collect();
        let mut g = grad_output.clone();
        for i in (0..n).rev() {
            let layer_input = if i == 0 {
                &cache.input
            } else {
                &cache.outputs[i - 1]
            };
            match &self.spec.layers[i] {
                LayerSpec::Conv { activation, .. } => {
                    if *activation == Activation::Relu {
                        // the post-activation output is positive exactly where
                        // the pre-activation was, so it serves as the mask
                        g = relu_backward(&cache.outputs[i], &g)?;
                    }
                    let p = self.conv_params(i)?;
                    let (gi, gw, gb) = conv3d_backward(layer_input, &p, &g)?;
                    grads[i] = Some(LayerGrads {
                        weights: gw,
                        bias: gb,
                    });
                    g = gi;
                }
                LayerSpec::Classifier { .. } => {
                    let p = self.conv_params(i)?;
                    let (gi, gw, gb) = conv3d_backward(layer_input, &p, &g)?;
                    grads[i] = Some(LayerGrads {
                        weights: gw,
                        bias: gb,
                    });
                    g = gi;
                }
                LayerSpec::Pool { .. } => {
                    let arg = cache.argmax[i]
                        .as_ref()
                        .ok_or_else(|| Error::Invalid("pool cache missing".into()))?;
                    g = maxpool3d_backward(layer_input.shape(), arg, &g)?;
                }
                LayerSpec::Gap { .. } => {
                    g = spatial_gap_backward(layer_input.shape(), &g)?;
                }
            }
        }
        Ok(Gradients(grads))
    }

    /// Write one blob per parameter tensor into `dir`.
    pub fn save_params(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, p) in self.params.iter().enumerate() {
            if let LayerParams::Conv { weights, bias } = p {
                let name = self.spec.layers[i].name();
                weights.save(&dir.join(format!("{i:02}_{name}.w.blob")))?;
                bias.save(&dir.join(format!("{i:02}_{name}.b.blob")))?;
            }
        }
        Ok(())
    }

    /// Load parameters previously written by `save_params`, verifying shapes.
    pub fn load_params(&mut self, dir: &Path) -> Result<()> {
        for i in 0..self.params.len() {
            let name = self.spec.layers[i].name().to_string();
            if let LayerParams::Conv { weights, bias } = &mut self.params[i] {
                let w = Tensor::load(&dir.join(format!("{i:02}_{name}.w.blob")))?;
                let b = Tensor::load(&dir.join(format!("{i:02}_{name}.b.blob")))?;
                if w.shape() != weights.shape() || b.shape() != bias.shape() {
                    return Err(Error::Checkpoint(format!(
                        "layer {name}: stored shapes {:?}/{:?} do not match network {:?}/{:?}",
                        w.shape(),
                        b.shape(),
                        weights.shape(),
                        bias.shape()
                    )));
                }
                *weights = w;
                *bias = b;
            }
        }
        Ok(())
    }
}

/// (N, C, L, 1, 1) -> (N, C, L); anything with wider spatial extent is refused.
pub fn squeeze_scores(out: Tensor) -> Result<Tensor> {
    let s = out.shape().to_vec();
    if s.len() != 5 || s[3] != 1 || s[4] != 1 {
        return Err(Error::Shape(format!(
            "expected per-frame scores shaped (N, C, L, 1, 1), got {:?}",
            s
        )));
    }
    out.reshape(&[s[0], s[1], s[2]])
}
