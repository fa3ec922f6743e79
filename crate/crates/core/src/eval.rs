//! Frame-level and segment-level detection metrics.
//!
//! Both levels use the same non-interpolated average precision: rank
//! predictions by confidence, and AP = (sum of precision at each
//! true-positive rank) / (number of positives). Frame level ranks every test
//! frame by one class's score; segment level matches detections to ground
//! truth at an IoU threshold first.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::localize::{FrameScoreMatrix, Segment};

/// Intersection-over-union of two segments' inclusive frame sets.
pub fn iou(a: &Segment, b: &Segment) -> f64 {
    a.iou(b)
}

/// AP of one class; `ap` is None when the class has no positives.
#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub positives: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMapReport {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with defined AP; None if no class had positives.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentMapReport {
    pub per_threshold: Vec<ThresholdReport>,
}

/// Non-interpolated AP over a ranked positive/negative sequence.
pub fn average_precision(ranked_is_positive: &[bool], total_positives: usize) -> Option<f64> {
    if total_positives == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (i, &pos) in ranked_is_positive.iter().enumerate() {
        if pos {
            tp += 1;
            sum += tp as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_positives as f64)
}

fn mean_ap(per_class: &[ClassAp]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Frame-level retrieval mAP: for each action class, pool every frame of
/// every video, rank by that class's score, and score the ranking against
/// the frame labels (0 = background). `labels` maps video id to per-frame
/// class ids and must cover exactly the videos scored.
pub fn frame_level_map(
    scores: &[FrameScoreMatrix],
    labels: &BTreeMap<String, Vec<usize>>,
    num_classes: usize,
) -> Result<FrameMapReport> {
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
        if let Some(&bad) = lab.iter().find(|&&c| c > num_classes) {
            return Err(Error::Invalid(format!(
                "video {}: label {bad} exceeds class count {num_classes}",
                m.video_id()
            )));
        }
    }

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        // (score, video, frame, positive)
        let mut pool: Vec<(f64, &str, usize, bool)> = Vec::new();
        for m in scores {
            let lab = &labels[m.video_id()];
            for t in 0..m.frames() {
                pool.push((m.score(t, class), m.video_id(), t, lab[t] == class));
            }
        }
        pool.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(b.1))
                .then(a.2.cmp(&b.2))
        });
        let positives = pool.iter().filter(|e| e.3).count();
        let ranked: Vec<bool> = pool.iter().map(|e| e.3).collect();
        let ap = average_precision(&ranked, positives);
        if ap.is_none() {
            log::warn!("class {class} has no positive frames; excluded from frame-level mAP");
        }
        per_class.push(ClassAp {
            class_id: class,
            positives,
            ap,
        });
    }
    Ok(FrameMapReport {
        map: mean_ap(&per_class),
        per_class,
    })
}

/// Segment-level detection mAP at each IoU threshold.
///
/// Per class and threshold, detections are taken in confidence order (ties:
/// earlier start, then longer first) and each is matched to the same-video,
/// same-class, still-unmatched ground-truth segment of highest IoU; the
/// detection is a true positive when that IoU strictly exceeds the threshold.
pub fn segment_level_map(
    detections: &[Segment],
    ground_truth: &[Segment],
    iou_thresholds: &[f64],
) -> Result<SegmentMapReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::Invalid("need at least one IoU threshold".into()));
    }
    let known: HashSet<&str> = ground_truth.iter().map(|g| g.video_id.as_str()).collect();
    if let Some(d) = detections.iter().find(|d| !known.contains(d.video_id.as_str())) {
        return Err(Error::Invalid(format!(
            "detection references video {} with no ground truth",
            d.video_id
        )));
    }
    let classes: std::collections::BTreeSet<usize> =
        ground_truth.iter().map(|g| g.class_id).collect();

    let mut per_threshold = Vec::with_capacity(iou_thresholds.len());
    for &tau in iou_thresholds {
        let mut per_class = Vec::new();
        for &class in &classes {
            let truths: Vec<&Segment> =
                ground_truth.iter().filter(|g| g.class_id == class).collect();
            let mut dets: Vec<&Segment> =
                detections.iter().filter(|d| d.class_id == class).collect();
            dets.sort_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.start_frame.cmp(&b.start_frame))
                    .then(b.len().cmp(&a.len()))
            });
            let mut matched = vec![false; truths.len()];
            let mut ranked = Vec::with_capacity(dets.len());
            for det in &dets {
                let mut best: Option<(usize, f64)> = None;
                for (gi, gt) in truths.iter().enumerate() {
                    if matched[gi] || gt.video_id != det.video_id {
                        continue;
                    }
                    let ov = det.iou(gt);
                    if best.map_or(true, |(_, b)| ov > b) {
                        best = Some((gi, ov));
                    }
                }
                match best {
                    Some((gi, ov)) if ov > tau => {
                        matched[gi] = true;
                        ranked.push(true);
                    }
                    _ => ranked.push(false),
                }
            }
            let ap = average_precision(&ranked, truths.len());
            per_class.push(ClassAp {
                class_id: class,
                positives: truths.len(),
                ap,
            });
        }
        per_threshold.push(ThresholdReport {
            iou_threshold: tau,
            map: mean_ap(&per_class),
            per_class,
        });
    }
    Ok(SegmentMapReport { per_threshold })
}

fn fmt_ap(ap: Option<f64>) -> String {
    match ap {
        Some(v) => format!("{v:.4}"),
        None => "  n/a".into(),
    }
}

/// Aligned plain-text table for the frame-level report.
pub fn frame_report_text(report: &FrameMapReport) -> String {
    let mut out = String::from("frame-level average precision\n");
    out.push_str("class      positives      AP\n");
    for c in &report.per_class {
        out.push_str(&format!(
            "{:<10} {:>9} {:>7}\n",
            c.class_id,
            c.positives,
            fmt_ap(c.ap)
        ));
    }
    out.push_str(&format!("mAP: {}\n", fmt_ap(report.map)));
    out
}

/// Aligned plain-text table for the segment-level report.
pub fn segment_report_text(report: &SegmentMapReport) -> String {
    let mut out = String::from("segment-level mAP by IoU threshold\n");
    out.push_str("IoU    ");
    if let Some(first) = report.per_threshold.first() {
        for c in &first.per_class {
            out.push_str(&format!("  class{:<4}", c.class_id));
        }
    }
    out.push_str("      mAP\n");
    for t in &report.per_threshold {
        out.push_str(&format!("{:.2}   ", t.iou_threshold));
        for c in &t.per_class {
            out.push_str(&format!("  {:>8}", fmt_ap(c.ap)));
        }
        out.push_str(&format!("  {:>7}\n", fmt_ap(t.map)));
    }
    out
}
