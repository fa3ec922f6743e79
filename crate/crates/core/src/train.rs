//! Window construction, class balancing, and staged SGD training.
//!
//! Untrimmed videos are cut into fixed-length windows with per-frame labels;
//! windows containing no action frames are dropped. Training runs two stages:
//! stage 1 updates only the classifier layer at a higher learning rate,
//! stage 2 fine-tunes every layer at a lower one. All shuffling and batching
//! comes from a seeded generator, so a fixed seed reproduces checkpoints
//! bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::formats::Annotation;
use crate::network::{Gradients, LayerParams, Network, squeeze_scores};
use crate::ops::{per_frame_softmax_loss, upsample_temporal_backward, upsample_temporal_forward};
use crate::tensor::Tensor;

/// One training clip: `window_len` consecutive frames of one video plus a
/// class id per frame (0 = background). Kept only if at least one frame is
/// labeled with an action.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub video_id: String,
    pub start_frame: usize,
    /// Shape (C, L, H, W).
    pub clip: Tensor,
    /// Length L.
    pub labels: Vec<usize>,
}

/// Cut every video into windows of `window_len` frames taken every `stride`
/// frames, labeling each frame from the annotations (a frame inside several
/// annotations takes the highest class id). Windows whose frames are all
/// background are discarded; a ragged tail shorter than the window is not
/// emitted.
pub fn build_windows(
    videos: &[(String, Tensor)],
    annotations: &[Annotation],
    window_len: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Invalid("window length and stride must be >= 1".into()));
    }
    let video_frames: BTreeMap<&str, usize> = videos
        .iter()
        .map(|(id, t)| (id.as_str(), t.shape()[1]))
        .collect();
    for a in annotations {
        let frames = video_frames.get(a.video_id.as_str()).ok_or_else(|| {
            Error::Annotation(format!(
                "{},{},{},{}: unknown video",
                a.video_id, a.start_frame, a.end_frame, a.class_id
            ))
        })?;
        if a.end_frame >= *frames {
            return Err(Error::Annotation(format!(
                "{},{},{},{}: video has only {frames} frames",
                a.video_id, a.start_frame, a.end_frame, a.class_id
            )));
        }
    }
    let mut out = Vec::new();
    for (id, video) in videos {
        let shape = video.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "video {id} must be rank 4 (C, L, H, W), got {shape:?}"
            )));
        }
        let (c, frames, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let labels = label_frames(annotations, id, frames)?;
        let plane = h * w;
        let mut start = 0usize;
        while start + window_len <= frames {
            let window_labels = &labels[start..start + window_len];
            if window_labels.iter().any(|&l| l != 0) {
                let mut data = Vec::with_capacity(c * window_len * plane);
                for ch in 0..c {
                    let base = ch * frames * plane;
                    data.extend_from_slice(
                        &video.data()[base + start * plane..base + (start + window_len) * plane],
                    );
                }
                out.push(WindowSample {
                    video_id: id.clone(),
                    start_frame: start,
                    clip: Tensor::new(vec![c, window_len, h, w], data)?,
                    labels: window_labels.to_vec(),
                });
            }
            start += stride;
        }
    }
    Ok(out)
}

/// Per-frame class ids for one video: a frame inside an annotation takes its
/// class, background frames take 0, and a frame covered by several
/// annotations takes the highest class id (logged once per video).
pub fn label_frames(
    annotations: &[Annotation],
    video_id: &str,
    frames: usize,
) -> Result<Vec<usize>> {
    let mut labels = vec![0usize; frames];
    let mut overlapped = 0usize;
    for a in annotations.iter().filter(|a| a.video_id == video_id) {
        if a.end_frame >= frames {
            return Err(Error::Annotation(format!(
                "{},{},{},{}: video has only {frames} frames",
                a.video_id, a.start_frame, a.end_frame, a.class_id
            )));
        }
        for t in a.start_frame..=a.end_frame {
            if labels[t] != 0 {
                overlapped += 1;
            }
            labels[t] = labels[t].max(a.class_id);
        }
    }
    if overlapped > 0 {
        log::warn!(
            "video {video_id}: {overlapped} frames covered by overlapping annotations; \
             highest class id kept"
        );
    }
    Ok(labels)
}

/// Labeled-frame count per class over a window set.
pub fn class_frame_counts(samples: &[WindowSample]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        for &l in &s.labels {
            if l != 0 {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Duplicate whole windows of under-represented classes until every class
/// with any frames reaches `target_frames_per_class` labeled frames. Never
/// deletes a sample; the duplication order is shuffled deterministically from
/// `seed`. Classes absent from the data are reported and skipped.
pub fn balance_classes(
    samples: &[WindowSample],
    num_classes: usize,
    target_frames_per_class: usize,
    seed: u64,
) -> Result<Vec<WindowSample>> {
    if target_frames_per_class == 0 {
        return Err(Error::Invalid("balance target must be >= 1".into()));
    }
    let mut out: Vec<WindowSample> = samples.to_vec();
    let mut counts = class_frame_counts(&out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Top up the scarcest classes first so label spill-over from duplicated
    // windows (which may carry several classes) is counted before later tops.
    let mut order: Vec<usize> = (1..=num_classes).collect();
    order.sort_by_key(|c| counts.get(c).copied().unwrap_or(0));
    for class in order {
        let have = counts.get(&class).copied().unwrap_or(0);
        if have == 0 {
            log::warn!("class {class} has no labeled frames; skipped in balancing");
            continue;
        }
        if have >= target_frames_per_class {
            continue;
        }
        let mut pool: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.iter().any(|&l| l == class))
            .map(|(i, _)| i)
            .collect();
        pool.shuffle(&mut rng);
        let mut cursor = 0usize;
        while counts[&class] < target_frames_per_class {
            let sample = &samples[pool[cursor % pool.len()]];
            cursor += 1;
            for &l in &sample.labels {
                if l != 0 {
                    *counts.entry(l).or_insert(0) += 1;
                }
            }
            out.push(sample.clone());
        }
    }
    Ok(out)
}

/// Per-layer momentum buffers plus the update hyperparameters.
#[derive(Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One (weights, bias) velocity pair per parameterized layer, aligned
    /// with the network's layer list.
    pub velocity: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimizerState {
    /// Zero velocities shaped like the network's parameters.
    pub fn new(network: &Network, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = network
            .params()
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weights, bias } => {
                    Some((Tensor::zeros(weights.shape()), Tensor::zeros(bias.shape())))
                }
                LayerParams::Stateless => None,
            })
            .collect();
        OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        }
    }
}

fn update_pair(
    param: &mut Tensor,
    vel: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    mu: f64,
    wd: f64,
) {
    let p = param.data_mut();
    let v = vel.data_mut();
    let g = grad.data();
    for i in 0..p.len() {
        v[i] = mu * v[i] - lr * (g[i] + wd * p[i]);
        p[i] += v[i];
    }
}

/// One SGD-with-momentum update: v ← μ·v − lr·(g + wd·p); p ← p + v.
/// Layers outside `trainable` are left untouched (velocity included). A
/// non-finite gradient aborts with the offending layer's name.
pub fn sgd_step(
    network: &mut Network,
    grads: &Gradients,
    state: &mut OptimizerState,
    trainable: &[bool],
) -> Result<()> {
    let spec = network.spec().clone();
    if trainable.len() != spec.layers.len() {
        return Err(Error::Invalid(format!(
            "trainable mask has {} entries for {} layers",
            trainable.len(),
            spec.layers.len()
        )));
    }
    for i in 0..spec.layers.len() {
        if !trainable[i] {
            continue;
        }
        let Some(g) = &grads.0[i] else { continue };
        if !g.weights.all_finite() || !g.bias.all_finite() {
            return Err(Error::NonFiniteGradient(spec.layers[i].name().to_string()));
        }
        let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
        let Some((vw, vb)) = state.velocity[i].as_mut() else {
            return Err(Error::Invalid(format!(
                "no velocity buffer for layer {}",
                spec.layers[i].name()
            )));
        };
        match &mut network.params_mut()[i] {
            LayerParams::Conv { weights, bias } => {
                update_pair(weights, vw, &g.weights, lr, mu, wd);
                update_pair(bias, vb, &g.bias, lr, mu, wd);
            }
            LayerParams::Stateless => {
                return Err(Error::Invalid(format!(
                    "gradient reported for stateless layer {}",
                    spec.layers[i].name()
                )));
            }
        }
    }
    Ok(())
}

/// Two-stage schedule; the defaults follow the reference training recipe
/// (stage-1 classifier-only at 1e-4, stage-2 full fine-tune at 1e-5,
/// momentum 0.9, weight decay 5e-4).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1_lr: 1e-4,
            stage2_lr: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            stage1_epochs: 50,
            stage2_epochs: 50,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// One "epoch,stage,loss" record.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    spec_digest: String,
    stage: usize,
    epoch: usize,
}

/// Write `spec.toml`, `state.toml`, and one blob per parameter and velocity
/// tensor under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    network: &Network,
    state: &OptimizerState,
    stage: usize,
    epoch: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join("spec.toml"), network.spec().to_toml()?)
        .map_err(|e| Error::io(dir.join("spec.toml"), e))?;
    let meta = CheckpointState {
        spec_digest: network.spec().digest()?,
        stage,
        epoch,
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("cannot serialize checkpoint state: {e}")))?;
    std::fs::write(dir.join("state.toml"), text)
        .map_err(|e| Error::io(dir.join("state.toml"), e))?;
    network.save_params(&dir.join("params"))?;
    let vdir = dir.join("velocity");
    std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    for (i, v) in state.velocity.iter().enumerate() {
        if let Some((vw, vb)) = v {
            let name = network.spec().layers[i].name();
            vw.save(&vdir.join(format!("{i:02}_{name}.w.blob")))?;
            vb.save(&vdir.join(format!("{i:02}_{name}.b.blob")))?;
        }
    }
    Ok(())
}

/// Rebuild a network from a checkpoint directory, verifying that the stored
/// spec digest matches the stored spec.
pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let spec_text = std::fs::read_to_string(dir.join("spec.toml"))
        .map_err(|e| Error::io(dir.join("spec.toml"), e))?;
    let spec = NetworkSpec::from_toml(&spec_text)?;
    let state_text = std::fs::read_to_string(dir.join("state.toml"))
        .map_err(|e| Error::io(dir.join("state.toml"), e))?;
    let meta: CheckpointState = toml::from_str(&state_text)
        .map_err(|e| Error::Checkpoint(format!("bad state.toml: {e}")))?;
    let digest = spec.digest()?;
    if meta.spec_digest != digest {
        return Err(Error::Checkpoint(format!(
            "spec digest {} does not match stored {}",
            digest, meta.spec_digest
        )));
    }
    let mut network = Network::init(spec, 0)?;
    network.load_params(&dir.join("params"))?;
    Ok(network)
}

/// Stack samples into one batch: input (N, C, L, H, W) plus one-hot labels
/// (N, K+1, L).
fn make_batch(samples: &[&WindowSample], num_classes: usize) -> Result<(Tensor, Tensor)> {
    let first = samples[0].clip.shape();
    let (c, l, h, w) = (first[0], first[1], first[2], first[3]);
    let n = samples.len();
    let mut data = Vec::with_capacity(n * c * l * h * w);
    let k1 = num_classes + 1;
    let mut labels = Tensor::zeros(&[n, k1, l]);
    for (bi, s) in samples.iter().enumerate() {
        if s.clip.shape() != first {
            return Err(Error::Shape(format!(
                "window {} has shape {:?}, batch expects {:?}",
                s.video_id,
                s.clip.shape(),
                first
            )));
        }
        data.extend_from_slice(s.clip.data());
        for (t, &class) in s.labels.iter().enumerate() {
            if class >= k1 {
                return Err(Error::Invalid(format!(
                    "label {class} out of range for {num_classes} classes"
                )));
            }
            labels.set(&[bi, class, t], 1.0);
        }
    }
    Ok((Tensor::new(vec![n, c, l, h, w], data)?, labels))
}

/// Forward a batch and return (loss, gradient w.r.t. the network's raw
/// score output). When the network emits scores at a reduced temporal rate,
/// the logits are linearly upsampled to the frame rate before the loss, and
/// the gradient flows back through that interpolation.
fn batch_loss(
    network: &Network,
    input: &Tensor,
    labels: &Tensor,
) -> Result<(f64, Tensor, crate::network::ForwardCache)> {
    let (out, cache) = network.forward_cached(input)?;
    let out_shape = out.shape().to_vec();
    let logits = squeeze_scores(out)?;
    let factor = network.spec().score_upsample_factor;
    let (loss, grad) = if factor > 1 {
        let full = upsample_temporal_forward(&logits, factor)?;
        let (loss, g_full) = per_frame_softmax_loss(&full, labels)?;
        (loss, upsample_temporal_backward(logits.shape(), factor, &g_full)?)
    } else {
        per_frame_softmax_loss(&logits, labels)?
    };
    Ok((loss, grad.reshape(&out_shape)?, cache))
}

fn classifier_only_mask(spec: &NetworkSpec) -> Vec<bool> {
    spec.layers
        .iter()
        .map(|l| matches!(l, LayerSpec::Classifier { .. }))
        .collect()
}

/// Run the two-stage schedule over `samples` from a fresh seeded network,
/// checkpointing into `out_dir` after every epoch. Logs one
/// `epoch,stage,loss` line per epoch. A non-finite epoch loss aborts with
/// the last good checkpoint preserved.
pub fn train(
    spec: &NetworkSpec,
    samples: &[WindowSample],
    schedule: &Schedule,
    out_dir: &Path,
) -> Result<(Network, TrainReport)> {
    let network = Network::init(spec.clone(), schedule.seed)?;
    run_stages(network, samples, schedule, out_dir, 0, None)
}

/// Continue a run whose checkpoint lives under `out_dir`: the epoch counter
/// picks up where `state.toml` left off and momentum buffers are restored,
/// so an interrupted run resumed under the same schedule reproduces the
/// uninterrupted one bit for bit.
pub fn resume_training(
    samples: &[WindowSample],
    schedule: &Schedule,
    out_dir: &Path,
) -> Result<(Network, TrainReport)> {
    let dir = out_dir.join("checkpoint");
    let network = load_checkpoint(&dir)?;
    let state_text = std::fs::read_to_string(dir.join("state.toml"))
        .map_err(|e| Error::io(dir.join("state.toml"), e))?;
    let meta: CheckpointState = toml::from_str(&state_text)
        .map_err(|e| Error::Checkpoint(format!("bad state.toml: {e}")))?;
    let velocity = load_velocity(&dir.join("velocity"), &network)?;
    run_stages(network, samples, schedule, out_dir, meta.epoch, Some(velocity))
}

fn load_velocity(dir: &Path, network: &Network) -> Result<Vec<Option<(Tensor, Tensor)>>> {
    let mut out = Vec::with_capacity(network.params().len());
    for (i, p) in network.params().iter().enumerate() {
        match p {
            LayerParams::Conv { weights, bias } => {
                let name = network.spec().layers[i].name();
                let vw = Tensor::load(&dir.join(format!("{i:02}_{name}.w.blob")))?;
                let vb = Tensor::load(&dir.join(format!("{i:02}_{name}.b.blob")))?;
                if vw.shape() != weights.shape() || vb.shape() != bias.shape() {
                    return Err(Error::Checkpoint(format!(
                        "velocity for layer {name} has shape {:?}/{:?}, expected {:?}/{:?}",
                        vw.shape(),
                        vb.shape(),
                        weights.shape(),
                        bias.shape()
                    )));
                }
                out.push(Some((vw, vb)));
            }
            LayerParams::Stateless => out.push(None),
        }
    }
    Ok(out)
}

fn run_stages(
    mut network: Network,
    samples: &[WindowSample],
    schedule: &Schedule,
    out_dir: &Path,
    completed_epochs: usize,
    mut resumed_velocity: Option<Vec<Option<(Tensor, Tensor)>>>,
) -> Result<(Network, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training windows".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let spec = network.spec().clone();
    let all_layers = vec![true; spec.layers.len()];
    let head_only = classifier_only_mask(&spec);
    let checkpoint_dir = out_dir.join("checkpoint");
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    shuffle_rng.set_stream(1);
    // replay the shuffles of already-finished epochs so a resumed run sees
    // the same sample order the uninterrupted run would have
    for _ in 0..completed_epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        checkpoint_dir: checkpoint_dir.clone(),
    };
    let mut global_epoch = completed_epochs;
    let mut have_checkpoint = completed_epochs > 0;
    let mut stage_start = 0usize;
    for (stage, lr, epochs, mask) in [
        (1, schedule.stage1_lr, schedule.stage1_epochs, &head_only),
        (2, schedule.stage2_lr, schedule.stage2_epochs, &all_layers),
    ] {
        let stage_end = stage_start + epochs;
        if global_epoch >= stage_end {
            stage_start = stage_end;
            continue;
        }
        let mut state =
            OptimizerState::new(&network, lr, schedule.momentum, schedule.weight_decay);
        if global_epoch > stage_start {
            // resuming mid-stage: restore the momentum buffers
            if let Some(v) = resumed_velocity.take() {
                state.velocity = v;
            }
        }
        resumed_velocity = None;
        while global_epoch < stage_end {
            global_epoch += 1;
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(schedule.batch_size) {
                let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (input, labels) = make_batch(&batch, spec.num_classes)?;
                let (loss, grad, cache) = batch_loss(&network, &input, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: global_epoch,
                        loss,
                        checkpoint: if have_checkpoint {
                            checkpoint_dir.display().to_string()
                        } else {
                            "(none)".into()
                        },
                    });
                }
                epoch_loss += loss;
                batches += 1;
                let grads = network.backward(&cache, &grad)?;
                sgd_step(&mut network, &grads, &mut state, mask)?;
            }
            let mean_loss = epoch_loss / batches as f64;
            log::info!("{global_epoch},{stage},{mean_loss:.6}");
            report.epochs.push(EpochRecord {
                epoch: global_epoch,
                stage,
                loss: mean_loss,
            });
            save_checkpoint(&checkpoint_dir, &network, &state, stage, global_epoch)?;
            have_checkpoint = true;
        }
        stage_start = stage_end;
    }
    if !have_checkpoint {
        // zero-epoch schedules still leave a usable checkpoint behind
        let state = OptimizerState::new(
            &network,
            schedule.stage2_lr,
            schedule.momentum,
            schedule.weight_decay,
        );
        save_checkpoint(&checkpoint_dir, &network, &state, 0, 0)?;
    }
    Ok((network, report))
}
