//! Batch command-line pipeline: synth, train, predict, localize, evaluate,
//! bench, shapes.
//!
//! Every subcommand reads its settings from flags, with an optional TOML
//! config file (`--config`) supplying defaults section by section; explicit
//! flags always win. Commands print their human-readable summary on stdout,
//! keep diagnostics on stderr via the logger, and return structured summaries
//! so integration tests can assert on results without scraping text.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{build_preset, LayerSpec, MiniScale, PRESET_NAMES};
use crate::error::{Error, Result};
use crate::eval::{
    frame_level_map, frame_report_text, segment_level_map, segment_report_text, FrameMapReport,
    SegmentMapReport,
};
use crate::formats::{read_annotations, read_segments, write_annotations, write_segments};
use crate::localize::{
    classify_proposal, fgm, interpolate_scores, nms, refine_boundaries, sort_for_suppression,
    tune_class_thresholds, FrameScoreMatrix, Segment,
};
use crate::network::Network;
use crate::synth::{emit_proposals, generate, SynthConfig};
use crate::tensor::Tensor;
use crate::train::{
    balance_classes, build_windows, class_frame_counts, label_frames, load_checkpoint,
    resume_training, train, EpochRecord, Schedule,
};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const DEFAULT_FGM_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Parser, Debug)]
#[command(
    name = "tpc",
    version,
    about = "frame-accurate temporal action localization pipeline"
)]
pub struct Cli {
    /// TOML file with per-subcommand sections supplying flag defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic untrimmed-video dataset with annotations and
    /// jittered proposals.
    Synth(SynthFlags),
    /// Train a preset on a generated split and write a checkpoint.
    Train(TrainFlags),
    /// Slide a trained network over videos and write per-frame score
    /// matrices.
    Predict(PredictFlags),
    /// Turn score matrices into detected segments (proposal refinement or
    /// frame grouping).
    Localize(LocalizeFlags),
    /// Score detections and/or frame predictions against annotations.
    Evaluate(EvaluateFlags),
    /// Measure inference throughput (frames per second) per preset.
    Bench(BenchFlags),
    /// Print per-layer output shapes, temporal rates, and receptive fields.
    Shapes(ShapesFlags),
}

/// Take file-config values for every flag the command line left unset.
macro_rules! fill_from {
    ($dst:expr, $src:expr; $($field:ident),+ $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field.clone(); } )+
    };
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: SynthFlags,
    train: TrainFlags,
    predict: PredictFlags,
    localize: LocalizeFlags,
    evaluate: EvaluateFlags,
    bench: BenchFlags,
    shapes: ShapesFlags,
}

/// Execute a parsed command line. Returns after printing the command's
/// summary; any error propagates to the caller for a nonzero exit.
pub fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(flags) => {
            let summary = cmd_synth(&resolve_synth(flags, &file.synth)?)?;
            print!("{}", summary.render());
        }
        Command::Train(flags) => {
            let summary = cmd_train(&resolve_train(flags, &file.train)?)?;
            print!("{}", summary.render());
        }
        Command::Predict(flags) => {
            let summary = cmd_predict(&resolve_predict(flags, &file.predict)?)?;
            print!("{}", summary.render());
        }
        Command::Localize(flags) => {
            let summary = cmd_localize(&resolve_localize(flags, &file.localize)?)?;
            print!("{}", summary.render());
        }
        Command::Evaluate(flags) => {
            let summary = cmd_evaluate(&resolve_evaluate(flags, &file.evaluate)?)?;
            print!("{}", summary.render());
        }
        Command::Bench(flags) => {
            let report = cmd_bench(&resolve_bench(flags, &file.bench)?)?;
            print!("{}", report.render());
        }
        Command::Shapes(flags) => {
            let report = cmd_shapes(&resolve_shapes(flags, &file.shapes)?)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- synth ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFlags {
    /// Output directory for the dataset (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of action classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_videos: Option<usize>,
    #[arg(long)]
    pub test_videos: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square spatial size in pixels.
    #[arg(long)]
    pub spatial: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_instances: Option<usize>,
    #[arg(long)]
    pub max_instances: Option<usize>,
    /// Background noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Proposal boundary jitter in frames.
    #[arg(long)]
    pub jitter: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOptions {
    pub out: PathBuf,
    pub seed: u64,
    pub classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub spatial: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub noise: f64,
    pub jitter: usize,
}

fn resolve_synth(mut flags: SynthFlags, file: &SynthFlags) -> Result<SynthOptions> {
    fill_from!(flags, file; out, seed, classes, train_videos, test_videos, frames, spatial,
        min_len, max_len, min_instances, max_instances, noise, jitter);
    let d = SynthConfig::default();
    Ok(SynthOptions {
        out: flags.out.ok_or_else(|| Error::Config("synth needs --out".into()))?,
        seed: flags.seed.unwrap_or(0),
        classes: flags.classes.unwrap_or(d.num_classes),
        train_videos: flags.train_videos.unwrap_or(24),
        test_videos: flags.test_videos.unwrap_or(8),
        frames: flags.frames.unwrap_or(d.frames),
        spatial: flags.spatial.unwrap_or(d.height),
        min_len: flags.min_len.unwrap_or(d.min_instance_len),
        max_len: flags.max_len.unwrap_or(d.max_instance_len),
        min_instances: flags.min_instances.unwrap_or(d.min_instances),
        max_instances: flags.max_instances.unwrap_or(d.max_instances),
        noise: flags.noise.unwrap_or(d.noise),
        jitter: flags.jitter.unwrap_or(4),
    })
}

impl SynthOptions {
    fn split_config(&self, prefix: &str, videos: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: self.classes,
            videos,
            frames: self.frames,
            height: self.spatial,
            width: self.spatial,
            min_instance_len: self.min_len,
            max_instance_len: self.max_len,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            noise: self.noise,
            id_prefix: prefix.into(),
            seed,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SplitSummary {
    pub videos: usize,
    pub annotations: usize,
    /// Labeled frames per class id.
    pub frames_per_class: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize)]
pub struct SynthSummary {
    pub out: PathBuf,
    pub train: SplitSummary,
    pub test: SplitSummary,
    pub proposals: usize,
}

impl SynthSummary {
    pub fn render(&self) -> String {
        let mut s = format!("dataset written to {}\n", self.out.display());
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            s.push_str(&format!(
                "{name}: {} videos, {} annotations; labeled frames per class:",
                split.videos, split.annotations
            ));
            for (class, frames) in &split.frames_per_class {
                s.push_str(&format!(" {class}={frames}"));
            }
            s.push('\n');
        }
        s.push_str(&format!("proposals: {}\n", self.proposals));
        s
    }
}

fn write_split(dir: &Path, data: &crate::synth::SynthDataset) -> Result<SplitSummary> {
    let videos_dir = dir.join("videos");
    std::fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
    for (id, tensor) in &data.videos {
        tensor.save(&videos_dir.join(format!("{id}.blob")))?;
    }
    write_annotations(dir.join("annotations.csv"), &data.annotations)?;
    let mut frames_per_class = BTreeMap::new();
    for a in &data.annotations {
        *frames_per_class.entry(a.class_id).or_insert(0) += a.end_frame - a.start_frame + 1;
    }
    Ok(SplitSummary {
        videos: data.videos.len(),
        annotations: data.annotations.len(),
        frames_per_class,
    })
}

/// Generate train and test splits (disjoint seeds), write videos as blobs,
/// annotations and jittered proposals as line files, and the resolved
/// options as `config.toml`.
pub fn cmd_synth(opts: &SynthOptions) -> Result<SynthSummary> {
    let train_cfg = opts.split_config("train", opts.train_videos, opts.seed);
    let test_cfg = opts.split_config("test", opts.test_videos, opts.seed + 1);
    let train_data = generate(&train_cfg)?;
    let test_data = generate(&test_cfg)?;
    let train = write_split(&opts.out.join("train"), &train_data)?;
    let test = write_split(&opts.out.join("test"), &test_data)?;
    let proposals = emit_proposals(&test_data.annotations, opts.frames, opts.jitter, opts.seed + 2);
    write_segments(opts.out.join("test").join("proposals.csv"), &proposals)?;
    let cfg_text = toml::to_string_pretty(opts)
        .map_err(|e| Error::Config(format!("cannot serialize synth options: {e}")))?;
    std::fs::write(opts.out.join("config.toml"), cfg_text)
        .map_err(|e| Error::io(opts.out.join("config.toml"), e))?;
    Ok(SynthSummary {
        out: opts.out.clone(),
        train,
        test,
        proposals: proposals.len(),
    })
}

// ---------------------------------------------------------------- train ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlags {
    /// Split directory holding videos/ and annotations.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; the checkpoint lands in OUT/checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Action classes; defaults to the highest class id in the annotations.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    /// Frames per class to balance to; defaults to the majority class count.
    #[arg(long)]
    pub balance_target: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub preset: String,
    pub classes: Option<usize>,
    pub window_len: usize,
    pub window_stride: usize,
    pub balance_target: Option<usize>,
    pub schedule: Schedule,
    pub resume: bool,
}

fn resolve_train(mut flags: TrainFlags, file: &TrainFlags) -> Result<TrainOptions> {
    fill_from!(flags, file; data, out, preset, seed, classes, window_len, window_stride,
        balance_target, stage1_epochs, stage2_epochs, stage1_lr, stage2_lr, momentum,
        weight_decay, batch_size);
    let d = Schedule::default();
    let window_len = flags.window_len.unwrap_or(32);
    Ok(TrainOptions {
        data: flags.data.ok_or_else(|| Error::Config("train needs --data".into()))?,
        out: flags.out.ok_or_else(|| Error::Config("train needs --out".into()))?,
        preset: flags.preset.unwrap_or_else(|| "tpc-mini".into()),
        classes: flags.classes,
        window_len,
        window_stride: flags.window_stride.unwrap_or(window_len),
        balance_target: flags.balance_target,
        schedule: Schedule {
            stage1_lr: flags.stage1_lr.unwrap_or(d.stage1_lr),
            stage2_lr: flags.stage2_lr.unwrap_or(d.stage2_lr),
            momentum: flags.momentum.unwrap_or(d.momentum),
            weight_decay: flags.weight_decay.unwrap_or(d.weight_decay),
            stage1_epochs: flags.stage1_epochs.unwrap_or(d.stage1_epochs),
            stage2_epochs: flags.stage2_epochs.unwrap_or(d.stage2_epochs),
            batch_size: flags.batch_size.unwrap_or(d.batch_size),
            seed: flags.seed.unwrap_or(d.seed),
        },
        resume: flags.resume,
    })
}

/// Load every `videos/*.blob` of a split directory, sorted by video id.
fn load_videos(split: &Path) -> Result<Vec<(String, Tensor)>> {
    let dir = split.join("videos");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "blob"))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad video file name {}", path.display())))?
            .to_string();
        out.push((id, Tensor::load(&path)?));
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("no video blobs under {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub windows: usize,
    pub balanced_windows: usize,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_dir: PathBuf,
}

impl TrainSummary {
    pub fn render(&self) -> String {
        let final_loss = self
            .epochs
            .last()
            .map(|e| format!("{:.6}", e.loss))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "trained on {} windows ({} after balancing); {} epochs; final loss {}\ncheckpoint: {}\n",
            self.windows,
            self.balanced_windows,
            self.epochs.len(),
            final_loss,
            self.checkpoint_dir.display()
        )
    }
}

/// Build windows from the split, balance classes, and run (or resume) the
/// two-stage schedule.
pub fn cmd_train(opts: &TrainOptions) -> Result<TrainSummary> {
    let videos = load_videos(&opts.data)?;
    let annotations = read_annotations(opts.data.join("annotations.csv"))?;
    let classes = match opts.classes {
        Some(k) => k,
        None => annotations.iter().map(|a| a.class_id).max().ok_or_else(|| {
            Error::Invalid("annotation file is empty; pass --classes explicitly".into())
        })?,
    };
    let windows = build_windows(&videos, &annotations, opts.window_len, opts.window_stride)?;
    let target = match opts.balance_target {
        Some(t) => t,
        None => class_frame_counts(&windows).values().copied().max().unwrap_or(0),
    };
    let balanced = if target > 0 {
        balance_classes(&windows, classes, target, opts.schedule.seed)?
    } else {
        windows.clone()
    };
    let (_, report) = if opts.resume {
        resume_training(&balanced, &opts.schedule, &opts.out)?
    } else {
        let shape = videos[0].1.shape();
        let scale = MiniScale {
            input_channels: shape[0],
            input_length: opts.window_len,
            input_spatial: shape[2],
            ..MiniScale::default()
        };
        let spec = build_preset(&opts.preset, classes, scale)?;
        train(&spec, &balanced, &opts.schedule, &opts.out)?
    };
    Ok(TrainSummary {
        windows: windows.len(),
        balanced_windows: balanced.len(),
        epochs: report.epochs,
        checkpoint_dir: report.checkpoint_dir,
    })
}

// -------------------------------------------------------------- predict ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct PredictFlags {
    /// Split directory holding videos/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory (or a train --out directory containing one).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for per-video score matrices.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// If given, must match the preset the checkpoint was trained with.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub preset: Option<String>,
}

fn resolve_predict(mut flags: PredictFlags, file: &PredictFlags) -> Result<PredictOptions> {
    fill_from!(flags, file; data, checkpoint, out, preset);
    Ok(PredictOptions {
        data: flags.data.ok_or_else(|| Error::Config("predict needs --data".into()))?,
        checkpoint: flags
            .checkpoint
            .ok_or_else(|| Error::Config("predict needs --checkpoint".into()))?,
        out: flags.out.ok_or_else(|| Error::Config("predict needs --out".into()))?,
        preset: flags.preset,
    })
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join("spec.toml").exists() {
        path.to_path_buf()
    } else {
        path.join("checkpoint")
    }
}

/// Slide the network over one whole video without overlap and return a
/// row-per-frame score matrix. A tail shorter than the window is zero-padded
/// for inference and the padded frames are dropped from the output. Reduced-
/// rate presets are brought back to frame rate by linear interpolation.
pub fn predict_video(network: &Network, video_id: &str, video: &Tensor) -> Result<FrameScoreMatrix> {
    let spec = network.spec();
    let [c, l, h, w] = spec.input_shape;
    let vs = video.shape();
    if vs.len() != 4 || vs[0] != c || vs[2] != h || vs[3] != w {
        return Err(Error::Shape(format!(
            "video {video_id} has shape {vs:?}, network expects ({c}, *, {h}, {w})"
        )));
    }
    let frames = vs[1];
    let factor = spec.score_upsample_factor;
    let k1 = spec.num_classes + 1;
    let reduced_per_window = l / factor;
    let windows = frames.div_ceil(l);
    let plane = h * w;
    // per-class rows of the whole video's reduced-rate logits
    let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(windows * reduced_per_window); k1];
    let mut clip = vec![0.0f64; c * l * plane];
    for wi in 0..windows {
        let start = wi * l;
        let take = l.min(frames - start);
        clip.fill(0.0);
        for ch in 0..c {
            let src = ch * frames * plane + start * plane;
            let dst = ch * l * plane;
            clip[dst..dst + take * plane]
                .copy_from_slice(&video.data()[src..src + take * plane]);
        }
        let input = Tensor::new(vec![1, c, l, h, w], clip.clone())?;
        let logits = network.logits(&input)?; // (1, K+1, l/factor)
        for class in 0..k1 {
            let base = class * reduced_per_window;
            rows[class].extend_from_slice(&logits.data()[base..base + reduced_per_window]);
        }
    }
    let total_reduced = windows * reduced_per_window;
    let mut logits_data = Vec::with_capacity(k1 * total_reduced);
    for row in &rows {
        logits_data.extend_from_slice(row);
    }
    let logits = Tensor::new(vec![k1, total_reduced], logits_data)?;
    let reduced = FrameScoreMatrix::from_logits(video_id, &logits)?;
    let full = interpolate_scores(&reduced, factor)?;
    truncate_matrix(&full, frames)
}

fn truncate_matrix(m: &FrameScoreMatrix, frames: usize) -> Result<FrameScoreMatrix> {
    if m.frames() == frames {
        return Ok(m.clone());
    }
    let mut data = Vec::with_capacity(frames * m.classes());
    for t in 0..frames {
        data.extend_from_slice(m.row(t));
    }
    FrameScoreMatrix::new(m.video_id(), frames, m.classes(), data)
}

#[derive(Debug, Serialize)]
pub struct PredictSummary {
    pub out: PathBuf,
    /// (video id, frames scored) per video.
    pub videos: Vec<(String, usize)>,
}

impl PredictSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (id, frames) in &self.videos {
            s.push_str(&format!("{id}: {frames} frames scored\n"));
        }
        s.push_str(&format!(
            "score matrices for {} videos written to {}\n",
            self.videos.len(),
            self.out.display()
        ));
        s
    }
}

/// Score every video of a split with a trained checkpoint.
pub fn cmd_predict(opts: &PredictOptions) -> Result<PredictSummary> {
    let network = load_checkpoint(&checkpoint_dir(&opts.checkpoint))?;
    if let Some(preset) = &opts.preset {
        if network.spec().name != *preset {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with preset {}, but --preset says {} \
                 (spec digest {})",
                network.spec().name,
                preset,
                network.spec().digest()?
            )));
        }
    }
    let videos = load_videos(&opts.data)?;
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let mut summary = PredictSummary {
        out: opts.out.clone(),
        videos: Vec::with_capacity(videos.len()),
    };
    for (id, video) in &videos {
        let matrix = predict_video(&network, id, video)?;
        matrix.save(&opts.out.join(format!("{id}.blob")))?;
        summary.videos.push((id.clone(), matrix.frames()));
    }
    Ok(summary)
}

// ------------------------------------------------------------- localize ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeFlags {
    /// Directory of per-video score matrices.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Detection output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// "refine" (classify + trim proposals) or "fgm" (threshold grouping).
    #[arg(long)]
    pub mode: Option<String>,
    /// Proposal file (required in refine mode).
    #[arg(long)]
    pub proposals: Option<PathBuf>,
    /// Validation annotations for tuning per-class refine thresholds.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Suppression overlap threshold.
    #[arg(long)]
    pub nms: Option<f64>,
    /// Fixed refine threshold overriding tuning and the uniform fallback.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comma-separated grouping thresholds (fgm mode).
    #[arg(long)]
    pub fgm_thresholds: Option<String>,
    /// Minimum run length in frames (fgm mode).
    #[arg(long)]
    pub min_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizeMode {
    Refine,
    Fgm,
}

#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub scores: PathBuf,
    pub out: PathBuf,
    pub mode: LocalizeMode,
    pub proposals: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub nms: f64,
    pub threshold: Option<f64>,
    pub fgm_thresholds: Vec<f64>,
    pub min_len: usize,
}

fn resolve_localize(mut flags: LocalizeFlags, file: &LocalizeFlags) -> Result<LocalizeOptions> {
    fill_from!(flags, file; scores, out, mode, proposals, annotations, nms, threshold,
        fgm_thresholds, min_len);
    let mode = match flags.mode.as_deref() {
        Some("refine") => LocalizeMode::Refine,
        Some("fgm") => LocalizeMode::Fgm,
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown mode {other:?}; expected \"refine\" or \"fgm\""
            )))
        }
        None => return Err(Error::Config("localize needs --mode refine|fgm".into())),
    };
    let fgm_thresholds = match &flags.fgm_thresholds {
        None => DEFAULT_FGM_THRESHOLDS.to_vec(),
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad grouping threshold {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok(LocalizeOptions {
        scores: flags
            .scores
            .ok_or_else(|| Error::Config("localize needs --scores".into()))?,
        out: flags.out.ok_or_else(|| Error::Config("localize needs --out".into()))?,
        mode,
        proposals: flags.proposals,
        annotations: flags.annotations,
        nms: flags.nms.unwrap_or(0.4),
        threshold: flags.threshold,
        fgm_thresholds,
        min_len: flags.min_len.unwrap_or(1),
    })
}

/// Load every score matrix blob of a directory, keyed and sorted by video id.
fn load_score_matrices(dir: &Path) -> Result<Vec<FrameScoreMatrix>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "blob"))
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad score file name {}", path.display())))?
            .to_string();
        out.push(FrameScoreMatrix::load(&path, id)?);
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("no score matrices under {}", dir.display())));
    }
    Ok(out)
}

fn uniform_classes(matrices: &[FrameScoreMatrix]) -> Result<usize> {
    let k1 = matrices[0].classes();
    for m in matrices {
        if m.classes() != k1 {
            return Err(Error::Invalid(format!(
                "score matrices disagree on class count: {} has {}, {} has {}",
                matrices[0].video_id(),
                k1,
                m.video_id(),
                m.classes()
            )));
        }
    }
    Ok(k1 - 1)
}

#[derive(Debug, Serialize)]
pub struct LocalizeSummary {
    pub out: PathBuf,
    pub detections: usize,
    /// Per-class thresholds used in refine mode (index = class id).
    pub refine_thresholds: Option<Vec<f64>>,
}

impl LocalizeSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(taus) = &self.refine_thresholds {
            s.push_str("refine thresholds:");
            for (class, tau) in taus.iter().enumerate().skip(1) {
                s.push_str(&format!(" {class}={tau:.2}"));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "{} detections written to {}\n",
            self.detections,
            self.out.display()
        ));
        s
    }
}

/// Convert score matrices into detections, either by refining proposals or
/// by grouping thresholded frames, with per-video per-class suppression.
pub fn cmd_localize(opts: &LocalizeOptions) -> Result<LocalizeSummary> {
    let matrices = load_score_matrices(&opts.scores)?;
    let num_classes = uniform_classes(&matrices)?;
    let by_id: BTreeMap<&str, &FrameScoreMatrix> =
        matrices.iter().map(|m| (m.video_id(), m)).collect();
    let mut detections: Vec<Segment> = Vec::new();
    let mut refine_thresholds = None;
    match opts.mode {
        LocalizeMode::Refine => {
            let proposals_path = opts
                .proposals
                .as_ref()
                .ok_or_else(|| Error::Config("refine mode needs --proposals".into()))?;
            let proposals = read_segments(proposals_path)?;
            let taus = match opts.threshold {
                Some(t) => vec![t; num_classes + 1],
                None => match &opts.annotations {
                    Some(path) => {
                        let annotations = read_annotations(path)?;
                        let mut labels = BTreeMap::new();
                        for m in &matrices {
                            labels.insert(
                                m.video_id().to_string(),
                                label_frames(&annotations, m.video_id(), m.frames())?,
                            );
                        }
                        tune_class_thresholds(&matrices, &labels, num_classes)?
                    }
                    None => vec![1.0 / (num_classes + 1) as f64; num_classes + 1],
                },
            };
            for p in &proposals {
                let scores = by_id.get(p.video_id.as_str()).ok_or_else(|| {
                    Error::Invalid(format!("no score matrix for video {}", p.video_id))
                })?;
                let Some(classified) =
                    classify_proposal(&p.video_id, p.start_frame, p.end_frame, scores)?
                else {
                    continue;
                };
                if let Some(refined) =
                    refine_boundaries(&classified, scores, taus[classified.class_id])?
                {
                    detections.push(refined);
                }
            }
            refine_thresholds = Some(taus);
        }
        LocalizeMode::Fgm => {
            for m in &matrices {
                detections.extend(fgm(m, &opts.fgm_thresholds, opts.min_len)?);
            }
        }
    }
    // suppress per video, then emit in (video, confidence) order
    let mut kept: Vec<Segment> = Vec::new();
    for m in &matrices {
        let video: Vec<Segment> = detections
            .iter()
            .filter(|d| d.video_id == m.video_id())
            .cloned()
            .collect();
        if !video.is_empty() {
            kept.extend(nms(&video, opts.nms)?);
        }
    }
    kept.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut sorted = Vec::with_capacity(kept.len());
    for m in &matrices {
        let mut video: Vec<Segment> = kept
            .iter()
            .filter(|d| d.video_id == m.video_id())
            .cloned()
            .collect();
        sort_for_suppression(&mut video);
        sorted.extend(video);
    }
    if let Some(parent) = opts.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_segments(&opts.out, &sorted)?;
    Ok(LocalizeSummary {
        out: opts.out.clone(),
        detections: sorted.len(),
        refine_thresholds,
    })
}

// ------------------------------------------------------------- evaluate ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateFlags {
    /// Ground-truth annotation file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Score-matrix directory; enables the frame-level report.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Detection file; enables the segment-level report.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Write the machine-readable JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated segment IoU thresholds.
    #[arg(long)]
    pub iou_thresholds: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub annotations: PathBuf,
    pub scores: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iou_thresholds: Vec<f64>,
}

fn resolve_evaluate(mut flags: EvaluateFlags, file: &EvaluateFlags) -> Result<EvaluateOptions> {
    fill_from!(flags, file; annotations, scores, detections, out, iou_thresholds);
    if flags.scores.is_none() && flags.detections.is_none() {
        return Err(Error::Config(
            "evaluate needs --scores (frame level) and/or --detections (segment level)".into(),
        ));
    }
    let iou_thresholds = match &flags.iou_thresholds {
        None => DEFAULT_IOU_THRESHOLDS.to_vec(),
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad IoU threshold {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok(EvaluateOptions {
        annotations: flags
            .annotations
            .ok_or_else(|| Error::Config("evaluate needs --annotations".into()))?,
        scores: flags.scores,
        detections: flags.detections,
        out: flags.out,
        iou_thresholds,
    })
}

/// Combined evaluation report; serialized as-is for the machine-readable
/// output, rendered as aligned text for stdout.
#[derive(Debug, Serialize)]
pub struct EvaluateSummary {
    pub frame: Option<FrameMapReport>,
    pub segment: Option<SegmentMapReport>,
}

impl EvaluateSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(frame) = &self.frame {
            s.push_str(&frame_report_text(frame));
        }
        if let Some(segment) = &self.segment {
            if !s.is_empty() {
                s.push('\n');
            }
            s.push_str(&segment_report_text(segment));
        }
        s
    }
}

/// Frame-level and/or segment-level scoring against ground truth.
pub fn cmd_evaluate(opts: &EvaluateOptions) -> Result<EvaluateSummary> {
    let annotations = read_annotations(&opts.annotations)?;
    let frame = match &opts.scores {
        None => None,
        Some(dir) => {
            let matrices = load_score_matrices(dir)?;
            let num_classes = uniform_classes(&matrices)?;
            let mut labels = BTreeMap::new();
            for m in &matrices {
                labels.insert(
                    m.video_id().to_string(),
                    label_frames(&annotations, m.video_id(), m.frames())?,
                );
            }
            Some(frame_level_map(&matrices, &labels, num_classes)?)
        }
    };
    let segment = match &opts.detections {
        None => None,
        Some(path) => {
            let detections = read_segments(path)?;
            let truth: Vec<Segment> = annotations.iter().map(|a| a.to_segment()).collect();
            Some(segment_level_map(&detections, &truth, &opts.iou_thresholds)?)
        }
    };
    let summary = EvaluateSummary { frame, segment };
    if let Some(path) = &opts.out {
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------- bench ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct BenchFlags {
    /// Comma-separated preset names; default "tpc-mini,c3d-mini".
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub window_len: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub presets: Vec<String>,
    pub frames: usize,
    pub runs: usize,
    pub seed: u64,
    pub classes: usize,
    pub window_len: usize,
}

fn resolve_bench(mut flags: BenchFlags, file: &BenchFlags) -> Result<BenchOptions> {
    fill_from!(flags, file; preset, frames, runs, seed, classes, window_len);
    let presets = flags
        .preset
        .as_deref()
        .unwrap_or("tpc-mini,c3d-mini")
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    Ok(BenchOptions {
        presets,
        frames: flags.frames.unwrap_or(256),
        runs: flags.runs.unwrap_or(3),
        seed: flags.seed.unwrap_or(0),
        classes: flags.classes.unwrap_or(4),
        window_len: flags.window_len.unwrap_or(32),
    })
}

#[derive(Debug, Serialize)]
pub struct BenchEntry {
    pub preset: String,
    pub frames: usize,
    pub seconds_per_run: Vec<f64>,
    pub fps_per_run: Vec<f64>,
    pub mean_fps: f64,
    pub std_fps: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut s = String::from(
            "preset          frames   runs    mean FPS    std FPS    per-run FPS\n",
        );
        for e in &self.entries {
            let runs: Vec<String> = e.fps_per_run.iter().map(|f| format!("{f:.1}")).collect();
            s.push_str(&format!(
                "{:<15} {:>6} {:>6} {:>11.1} {:>10.1}    {}\n",
                e.preset,
                e.frames,
                e.fps_per_run.len(),
                e.mean_fps,
                e.std_fps,
                runs.join(" ")
            ));
        }
        s
    }
}

/// Time whole-video inference per preset on one random synthetic-sized video
/// and report frames per second, run by run.
pub fn cmd_bench(opts: &BenchOptions) -> Result<BenchReport> {
    use rand::{Rng, SeedableRng};
    if opts.runs == 0 {
        return Err(Error::Invalid("bench needs at least one run".into()));
    }
    let mut entries = Vec::with_capacity(opts.presets.len());
    for preset in &opts.presets {
        let scale = MiniScale {
            input_length: opts.window_len,
            ..MiniScale::default()
        };
        let spec = build_preset(preset, opts.classes, scale)?;
        let network = Network::init(spec, opts.seed)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let [c, _, h, w] = network.spec().input_shape;
        let video = Tensor::from_fn(&[c, opts.frames, h, w], |_| rng.gen_range(-1.0..1.0));
        let mut seconds = Vec::with_capacity(opts.runs);
        for _ in 0..opts.runs {
            let start = Instant::now();
            let matrix = predict_video(&network, "bench", &video)?;
            let elapsed = start.elapsed().as_secs_f64();
            if matrix.frames() != opts.frames {
                return Err(Error::Invalid("benchmark produced wrong frame count".into()));
            }
            seconds.push(elapsed);
        }
        let fps: Vec<f64> = seconds.iter().map(|s| opts.frames as f64 / s).collect();
        let mean = fps.iter().sum::<f64>() / fps.len() as f64;
        let var = fps.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / fps.len() as f64;
        entries.push(BenchEntry {
            preset: preset.clone(),
            frames: opts.frames,
            seconds_per_run: seconds,
            fps_per_run: fps,
            mean_fps: mean,
            std_fps: var.sqrt(),
        });
    }
    Ok(BenchReport { entries })
}

// --------------------------------------------------------------- shapes ----

#[derive(Args, Deserialize, Default, Debug, Clone)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesFlags {
    #[arg(long)]
    pub preset: Option<String>,
    /// Input temporal length.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub spatial: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ShapesOptions {
    pub preset: String,
    pub length: usize,
    pub classes: usize,
    pub spatial: usize,
}

fn resolve_shapes(mut flags: ShapesFlags, file: &ShapesFlags) -> Result<ShapesOptions> {
    fill_from!(flags, file; preset, length, classes, spatial);
    Ok(ShapesOptions {
        preset: flags
            .preset
            .ok_or_else(|| Error::Config(format!("shapes needs --preset (one of {PRESET_NAMES:?})")))?,
        length: flags.length.unwrap_or(32),
        classes: flags.classes.unwrap_or(4),
        spatial: flags.spatial.unwrap_or(32),
    })
}

#[derive(Debug, Serialize)]
pub struct ShapeRow {
    pub layer: String,
    pub kind: &'static str,
    /// (C, L, H, W) after the layer.
    pub output: [usize; 4],
    /// Temporal sampling rate of the layer's kernel (1 for dense layers).
    pub temporal_rate: usize,
    pub rf_extent: usize,
    pub rf_stride: usize,
}

#[derive(Debug, Serialize)]
pub struct ShapesReport {
    pub preset: String,
    pub input: [usize; 4],
    pub rows: Vec<ShapeRow>,
}

impl ShapesReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{}  input (C,L,H,W) = {:?}\n{:<12} {:<6} {:<20} {:>5} {:>10} {:>10}\n",
            self.preset, self.input, "layer", "kind", "output (C,L,H,W)", "rate", "RF extent", "RF stride"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<6} {:<20} {:>5} {:>10} {:>10}\n",
                r.layer,
                r.kind,
                format!("{:?}", r.output),
                r.temporal_rate,
                r.rf_extent,
                r.rf_stride
            ));
        }
        s
    }
}

/// Tabulate a preset's per-layer geometry: output shapes, temporal sampling
/// rates, and temporal receptive fields in input frames.
pub fn cmd_shapes(opts: &ShapesOptions) -> Result<ShapesReport> {
    let scale = MiniScale {
        input_length: opts.length,
        input_spatial: opts.spatial,
        ..MiniScale::default()
    };
    let spec = build_preset(&opts.preset, opts.classes, scale)?;
    let shapes = spec.infer_shapes()?;
    let mut rows = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let (kind, rate) = match layer {
            LayerSpec::Conv { temporal_rate, .. } => ("conv", *temporal_rate),
            LayerSpec::Pool { temporal_rate, .. } => ("pool", *temporal_rate),
            LayerSpec::Gap { .. } => ("gap", 1),
            LayerSpec::Classifier { .. } => ("class", 1),
        };
        let rf = spec.temporal_receptive_field(i)?;
        rows.push(ShapeRow {
            layer: layer.name().to_string(),
            kind,
            output: shapes[i],
            temporal_rate: rate,
            rf_extent: rf.extent_frames,
            rf_stride: rf.stride_frames,
        });
    }
    Ok(ShapesReport {
        preset: spec.name.clone(),
        input: spec.input_shape,
        rows,
    })
}
