//! Deterministic synthetic untrimmed videos with frame-accurate labels.
//!
//! Each video is Gaussian background noise; inside every annotated instance a
//! soft-edged bright square translates across the frame (wrapping at the
//! borders) with a velocity direction determined by the class. Classes are
//! therefore separable only through motion, never through appearance or
//! position, so a model must integrate over time to label frames correctly.
//! The first two frames of an instance ramp the pattern in at 1/3 and 2/3
//! amplitude, which keeps boundary frames informative but not trivial.
//!
//! Everything is a pure function of the config (seed included): the same
//! config yields bit-identical videos and annotations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::Annotation;
use crate::localize::Segment;
use crate::tensor::Tensor;

/// Side of the moving square's full-intensity core, in pixels.
const SQUARE_CORE: f64 = 2.5;
/// Distance at which the square's soft edge reaches zero.
const SQUARE_EDGE: f64 = 3.5;
/// Translation speed of the square, pixels per frame.
const SQUARE_SPEED: f64 = 1.25;
/// Minimum background gap between consecutive instances, in frames.
const MIN_GAP: usize = 2;

/// Parameters of one generated split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of action classes (background excluded). At least 2.
    pub num_classes: usize,
    /// Videos to generate.
    pub videos: usize,
    /// Frames per video.
    pub frames: usize,
    /// Spatial size (height, width).
    pub height: usize,
    pub width: usize,
    /// Inclusive range of instance lengths in frames.
    pub min_instance_len: usize,
    pub max_instance_len: usize,
    /// Inclusive range of instances per video.
    pub min_instances: usize,
    pub max_instances: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Prefix for video ids (`{prefix}_{index:03}`).
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            videos: 24,
            frames: 256,
            height: 32,
            width: 32,
            min_instance_len: 16,
            max_instance_len: 40,
            min_instances: 3,
            max_instances: 5,
            noise: 0.1,
            id_prefix: "train".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.min_instance_len == 0 || self.min_instance_len > self.max_instance_len {
            return Err(Error::Config(format!(
                "bad instance length range [{}, {}]",
                self.min_instance_len, self.max_instance_len
            )));
        }
        if self.max_instance_len > self.frames {
            return Err(Error::Config(format!(
                "instance length {} exceeds video length {}",
                self.max_instance_len, self.frames
            )));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "bad instances-per-video range [{}, {}]",
                self.min_instances, self.max_instances
            )));
        }
        if self.videos == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("zero-sized video dimensions".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("bad noise level {}", self.noise)));
        }
        Ok(())
    }

    fn video_id(&self, index: usize) -> String {
        format!("{}_{index:03}", self.id_prefix)
    }
}

/// A generated split: `(video id, tensor of shape (1, L, H, W))` pairs plus
/// exact annotations.
pub struct SynthDataset {
    pub videos: Vec<(String, Tensor)>,
    pub annotations: Vec<Annotation>,
}

/// Velocity (dy, dx) in pixels/frame for a class; directions are spread
/// evenly around the circle so every pair of classes differs in motion.
fn class_velocity(class_id: usize, num_classes: usize) -> (f64, f64) {
    let angle = std::f64::consts::TAU * (class_id - 1) as f64 / num_classes as f64;
    (SQUARE_SPEED * angle.sin(), SQUARE_SPEED * angle.cos())
}

/// Soft square profile on a torus: 1 inside the core, linear falloff to the
/// edge, 0 outside.
fn square_profile(delta: f64, extent: usize) -> f64 {
    let half = extent as f64 / 2.0;
    let d = (delta.rem_euclid(extent as f64) - half).abs();
    let d = half - d; // distance from pixel to center along the torus
    if d <= SQUARE_CORE {
        1.0
    } else if d < SQUARE_EDGE {
        SQUARE_EDGE - d
    } else {
        0.0
    }
}

struct Instance {
    start_frame: usize,
    len: usize,
    class_id: usize,
    /// Square center at the first frame.
    origin: (f64, f64),
}

/// Lay out one video's instances: lengths, gaps, classes, start positions.
fn layout_video(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    class_counter: &mut usize,
) -> Result<Vec<Instance>> {
    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let lengths: Vec<usize> = (0..count)
        .map(|_| rng.gen_range(cfg.min_instance_len..=cfg.max_instance_len))
        .collect();
    let needed: usize = lengths.iter().sum::<usize>() + MIN_GAP * count.saturating_sub(1);
    if needed > cfg.frames {
        return Err(Error::Invalid(format!(
            "cannot pack {count} instances totalling {needed} frames into a {}-frame video",
            cfg.frames
        )));
    }
    // Distribute the slack over the count+1 gaps one frame at a time.
    let mut gaps = vec![0usize; count + 1];
    for g in gaps.iter_mut().take(count).skip(1) {
        *g = MIN_GAP;
    }
    for _ in 0..cfg.frames - needed {
        let i = rng.gen_range(0..gaps.len());
        gaps[i] += 1;
    }
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += gaps[i];
        let class_id = *class_counter % cfg.num_classes + 1;
        *class_counter += 1;
        out.push(Instance {
            start_frame: cursor,
            len,
            class_id,
            origin: (
                rng.gen_range(0.0..cfg.height as f64),
                rng.gen_range(0.0..cfg.width as f64),
            ),
        });
        cursor += len;
    }
    Ok(out)
}

/// Generate one split of videos and their exact annotations.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut annotations = Vec::new();
    let mut class_counter = 0usize;
    let noise_dist = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("bad noise level: {e}")))?;
    for v in 0..cfg.videos {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(v as u64);
        let instances = layout_video(cfg, &mut rng, &mut class_counter)?;
        let id = cfg.video_id(v);
        for ins in &instances {
            annotations.push(Annotation {
                video_id: id.clone(),
                start_frame: ins.start_frame,
                end_frame: ins.start_frame + ins.len - 1,
                class_id: ins.class_id,
            });
        }
        let (h, w) = (cfg.height, cfg.width);
        let mut frame_data = vec![0.0f64; cfg.frames * h * w];
        if cfg.noise > 0.0 {
            for x in frame_data.iter_mut() {
                *x = noise_dist.sample(&mut rng);
            }
        }
        for ins in &instances {
            let (vy, vx) = class_velocity(ins.class_id, cfg.num_classes);
            for dt in 0..ins.len {
                let t = ins.start_frame + dt;
                let amp = ((dt + 1) as f64 / 3.0).min(1.0);
                let cy = ins.origin.0 + vy * dt as f64;
                let cx = ins.origin.1 + vx * dt as f64;
                let plane = &mut frame_data[t * h * w..(t + 1) * h * w];
                for y in 0..h {
                    let gy = square_profile(y as f64 - cy, h);
                    if gy == 0.0 {
                        continue;
                    }
                    for x in 0..w {
                        let gx = square_profile(x as f64 - cx, w);
                        if gx > 0.0 {
                            plane[y * w + x] += amp * gy * gx;
                        }
                    }
                }
            }
        }
        videos.push((id, Tensor::new(vec![1, cfg.frames, h, w], frame_data)?));
    }
    Ok(SynthDataset {
        videos,
        annotations,
    })
}

/// Perturb ground truth into imperfect proposals: every annotation's
/// boundaries move by a uniform offset in `[-jitter, +jitter]` (clamped to
/// the video), and each video gains one decoy proposal covering pure
/// background. Proposal class ids are 0 and confidences 1: downstream
/// classification assigns the real class or rejects the decoy.
pub fn emit_proposals(
    annotations: &[Annotation],
    video_frames: usize,
    jitter: usize,
    seed: u64,
) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(annotations.len());
    let j = jitter as i64;
    for a in annotations {
        let shift = |frame: usize, rng: &mut ChaCha8Rng| -> usize {
            let moved = frame as i64 + rng.gen_range(-j..=j);
            moved.clamp(0, video_frames as i64 - 1) as usize
        };
        let mut start = shift(a.start_frame, &mut rng);
        let end = shift(a.end_frame, &mut rng);
        if start > end {
            start = end;
        }
        out.push(Segment {
            video_id: a.video_id.clone(),
            start_frame: start,
            end_frame: end,
            class_id: 0,
            confidence: 1.0,
        });
    }
    // One background decoy per video, centered in its widest gap.
    let ids: BTreeSet<&str> = annotations.iter().map(|a| a.video_id.as_str()).collect();
    for id in ids {
        let mut spans: Vec<(usize, usize)> = annotations
            .iter()
            .filter(|a| a.video_id == id)
            .map(|a| (a.start_frame, a.end_frame))
            .collect();
        spans.sort_unstable();
        let mut gaps: Vec<(usize, usize)> = Vec::new();
        let mut cursor = 0usize;
        for &(s, e) in &spans {
            if s > cursor {
                gaps.push((cursor, s - 1));
            }
            cursor = cursor.max(e + 1);
        }
        if cursor < video_frames {
            gaps.push((cursor, video_frames - 1));
        }
        if let Some(&(gs, ge)) = gaps.iter().max_by_key(|(s, e)| e - s) {
            let len = ge - gs + 1;
            if len >= 4 {
                let quarter = len / 4;
                out.push(Segment {
                    video_id: id.to_string(),
                    start_frame: gs + quarter,
                    end_frame: ge - quarter,
                    class_id: 0,
                    confidence: 1.0,
                });
            }
        }
    }
    out
}
