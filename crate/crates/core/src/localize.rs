//! From per-frame class scores to scored temporal segments.
//!
//! Two routes produce segments: refining externally supplied proposals
//! (classify, then trim low-confidence ends), or grouping frames directly by
//! thresholding each class's score track at several levels. Both feed
//! per-class non-maximum suppression.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::upsample_sequence;
use crate::tensor::Tensor;

/// Per-frame class probabilities for one video: `frames` rows of `classes`
/// scores (class 0 is background), each row summing to 1.
#[derive(Debug, Clone)]
pub struct FrameScoreMatrix {
    video_id: String,
    frames: usize,
    classes: usize,
    /// row-major (frame, class)
    data: Vec<f64>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl FrameScoreMatrix {
    pub fn new(video_id: impl Into<String>, frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || classes < 2 {
            return Err(Error::Invalid(format!(
                "score matrix needs >= 1 frame and >= 2 classes, got {frames}x{classes}"
            )));
        }
        if data.len() != frames * classes {
            return Err(Error::Shape(format!(
                "score matrix data length {} != {frames} frames x {classes} classes",
                data.len()
            )));
        }
        let m = FrameScoreMatrix {
            video_id: video_id.into(),
            frames,
            classes,
            data,
        };
        for t in 0..frames {
            let row = m.row(t);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "video {}: frame {t} scores sum to {sum}, not 1",
                    m.video_id
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&v)) {
                return Err(Error::Invalid(format!(
                    "video {}: frame {t} has a score outside [0, 1]",
                    m.video_id
                )));
            }
        }
        Ok(m)
    }

    /// Softmax each frame of a logits tensor shaped (classes, frames).
    pub fn from_logits(video_id: impl Into<String>, logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "expected logits (classes, frames), got {:?}",
                s
            )));
        }
        let (classes, frames) = (s[0], s[1]);
        let x = logits.data();
        let mut data = vec![0.0; frames * classes];
        for t in 0..frames {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(x[c * frames + t]);
            }
            let mut z = 0.0;
            for c in 0..classes {
                z += (x[c * frames + t] - max).exp();
            }
            for c in 0..classes {
                data[t * classes + c] = (x[c * frames + t] - max).exp() / z;
            }
        }
        FrameScoreMatrix::new(video_id, frames, classes, data)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of score columns, i.e. K+1 including background.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn score(&self, t: usize, class: usize) -> f64 {
        self.data[t * self.classes + class]
    }

    /// One class's score track over all frames.
    pub fn class_track(&self, class: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.score(t, class)).collect()
    }

    /// Mean score of every class over the inclusive frame range.
    pub fn mean_scores(&self, start: usize, end: usize) -> Result<Vec<f64>> {
        if start > end || end >= self.frames {
            return Err(Error::Invalid(format!(
                "video {}: frame range [{start}, {end}] outside 0..{}",
                self.video_id, self.frames
            )));
        }
        let mut means = vec![0.0; self.classes];
        for t in start..=end {
            for (c, m) in means.iter_mut().enumerate() {
                *m += self.score(t, c);
            }
        }
        let n = (end - start + 1) as f64;
        for m in &mut means {
            *m /= n;
        }
        Ok(means)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Tensor::new(vec![self.frames, self.classes], self.data.clone())?.save(path)
    }

    pub fn load(path: &Path, video_id: impl Into<String>) -> Result<Self> {
        let t = Tensor::load(path)?;
        let s = t.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Blob(format!(
                "{}: score matrix blob must be rank 2, got {:?}",
                path.display(),
                s
            )));
        }
        FrameScoreMatrix::new(video_id, s[0], s[1], t.into_data())
    }
}

/// A temporal segment with inclusive frame bounds. Detections carry a class
/// in 1..=K (background segments are never emitted) and a confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub class_id: usize,
    pub confidence: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive bounds: a segment always covers >= 1 frame
    }

    /// Intersection-over-union of the inclusive frame sets; callers compare
    /// segments of one video.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter_start = self.start_frame.max(other.start_frame);
        let inter_end = self.end_frame.min(other.end_frame);
        if inter_start > inter_end {
            return 0.0;
        }
        let inter = (inter_end - inter_start + 1) as f64;
        let union = (self.len() + other.len()) as f64 - inter;
        inter / union
    }
}

/// Assign a class to a proposal: the class with the highest mean score over
/// the proposed frames. Proposals won by background are dropped (None).
pub fn classify_proposal(
    video_id: &str,
    start_frame: usize,
    end_frame: usize,
    scores: &FrameScoreMatrix,
) -> Result<Option<Segment>> {
    let means = scores.mean_scores(start_frame, end_frame)?;
    let mut best = 0usize;
    for (c, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = c;
        }
    }
    if best == 0 {
        return Ok(None);
    }
    Ok(Some(Segment {
        video_id: video_id.into(),
        start_frame,
        end_frame,
        class_id: best,
        confidence: means[best],
    }))
}

/// Trim the segment's ends inward past every frame whose class score is below
/// `threshold`; interior dips are kept. Returns None when no frame survives.
/// The surviving segment's confidence is the mean class score over its frames.
pub fn refine_boundaries(
    segment: &Segment,
    scores: &FrameScoreMatrix,
    threshold: f64,
) -> Result<Option<Segment>> {
    if segment.class_id == 0 || segment.class_id >= scores.classes() {
        return Err(Error::Invalid(format!(
            "cannot refine segment with class {} ({} score columns)",
            segment.class_id,
            scores.classes()
        )));
    }
    if segment.end_frame >= scores.frames() {
        return Err(Error::Invalid(format!(
            "video {}: segment [{}, {}] outside 0..{}",
            segment.video_id,
            segment.start_frame,
            segment.end_frame,
            scores.frames()
        )));
    }
    let mut start = segment.start_frame;
    let mut end = segment.end_frame;
    while start <= end && scores.score(start, segment.class_id) < threshold {
        start += 1;
    }
    while end > start && scores.score(end, segment.class_id) < threshold {
        end -= 1;
    }
    if start > end || scores.score(start, segment.class_id) < threshold {
        return Ok(None);
    }
    let means = scores.mean_scores(start, end)?;
    Ok(Some(Segment {
        video_id: segment.video_id.clone(),
        start_frame: start,
        end_frame: end,
        class_id: segment.class_id,
        confidence: means[segment.class_id],
    }))
}

/// Frame grouping: for every action class and every threshold, binarize the
/// class's score track (score >= threshold), and turn each maximal run of at
/// least `min_len` ones into a segment whose confidence is the run's mean
/// score. Segments from all thresholds are pooled; suppression happens later.
pub fn fgm(
    scores: &FrameScoreMatrix,
    thresholds: &[f64],
    min_len: usize,
) -> Result<Vec<Segment>> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("frame grouping needs at least one threshold".into()));
    }
    if let Some(bad) = thresholds.iter().find(|t| !(0.0 < **t && **t < 1.0)) {
        return Err(Error::Invalid(format!(
            "frame grouping thresholds must lie strictly between 0 and 1, got {bad}"
        )));
    }
    if min_len == 0 {
        return Err(Error::Invalid("min_len must be >= 1".into()));
    }
    let mut out = Vec::new();
    for class in 1..scores.classes() {
        let track = scores.class_track(class);
        for &tau in thresholds {
            let mut t = 0;
            while t < track.len() {
                if track[t] < tau {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < track.len() && track[t] >= tau {
                    t += 1;
                }
                let end = t - 1;
                if end - start + 1 >= min_len {
                    let mean = track[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
                    out.push(Segment {
                        video_id: scores.video_id().to_string(),
                        start_frame: start,
                        end_frame: end,
                        class_id: class,
                        confidence: mean,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic ordering used before suppression and matching: confidence
/// descending, then start ascending, then longer first.
pub fn sort_for_suppression(segments: &mut [Segment]) {
    segments.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start_frame.cmp(&b.start_frame))
            .then(b.len().cmp(&a.len()))
    });
}

/// Greedy per-class non-maximum suppression: keep the most confident segment,
/// drop every same-class segment overlapping it more than `overlap_threshold`,
/// repeat. All segments must come from one video.
pub fn nms(segments: &[Segment], overlap_threshold: f64) -> Result<Vec<Segment>> {
    if let Some(first) = segments.first() {
        if let Some(other) = segments.iter().find(|s| s.video_id != first.video_id) {
            return Err(Error::Invalid(format!(
                "suppression mixes videos {} and {}",
                first.video_id, other.video_id
            )));
        }
    }
    let mut pool: Vec<Segment> = segments.to_vec();
    sort_for_suppression(&mut pool);
    let mut kept: Vec<Segment> = Vec::new();
    for candidate in pool {
        let suppressed = kept.iter().any(|k| {
            k.class_id == candidate.class_id && k.iou(&candidate) > overlap_threshold
        });
        if !suppressed {
            kept.push(candidate);
        }
    }
    Ok(kept)
}

/// Stretch a reduced-rate score matrix back to frame rate by per-class linear
/// interpolation (endpoints aligned). Length L/f in, length L out.
pub fn interpolate_scores(scores: &FrameScoreMatrix, factor: usize) -> Result<FrameScoreMatrix> {
    if factor == 0 {
        return Err(Error::Invalid("interpolation factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(scores.clone());
    }
    let out_frames = scores.frames() * factor;
    let mut data = vec![0.0; out_frames * scores.classes()];
    for class in 0..scores.classes() {
        let track = upsample_sequence(&scores.class_track(class), factor)?;
        for (t, v) in track.into_iter().enumerate() {
            data[t * scores.classes() + class] = v;
        }
    }
    FrameScoreMatrix::new(scores.video_id(), out_frames, scores.classes(), data)
}

/// Pick one boundary-refinement threshold per class on labeled validation
/// scores: the candidate in {0.05, 0.10, ..., 0.95} maximizing that class's
/// frame-level F1 (predicted positive where the class score ≥ τ). Ties take
/// the lowest candidate. Entry 0 (background) is unused and set to 0.
pub fn tune_class_thresholds(
    scores: &[FrameScoreMatrix],
    labels: &std::collections::BTreeMap<String, Vec<usize>>,
    num_classes: usize,
) -> Result<Vec<f64>> {
    for m in scores {
        let lab = labels.get(m.video_id()).ok_or_else(|| {
            Error::Invalid(format!("no frame labels for video {}", m.video_id()))
        })?;
        if lab.len() != m.frames() {
            return Err(Error::Invalid(format!(
                "video {}: {} frames scored but {} labels",
                m.video_id(),
                m.frames(),
                lab.len()
            )));
        }
        if m.classes() != num_classes + 1 {
            return Err(Error::Invalid(format!(
                "video {}: score matrix has {} columns, expected {}",
                m.video_id(),
                m.classes(),
                num_classes + 1
            )));
        }
    }
    let mut thresholds = vec![0.0; num_classes + 1];
    for class in 1..=num_classes {
        let mut best = (f64::NEG_INFINITY, 0.0);
        for step in 1..=19 {
            let tau = step as f64 * 0.05;
            let (mut tp, mut fp, mut missed) = (0usize, 0usize, 0usize);
            for m in scores {
                let lab = &labels[m.video_id()];
                for t in 0..m.frames() {
                    let predicted = m.score(t, class) >= tau;
                    let actual = lab[t] == class;
                    match (predicted, actual) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => missed += 1,
                        (false, false) => {}
                    }
                }
            }
            let denom = 2 * tp + fp + missed;
            let f1 = if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            };
            if f1 > best.0 {
                best = (f1, tau);
            }
        }
        thresholds[class] = best.1;
    }
    Ok(thresholds)
}
