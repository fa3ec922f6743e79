//! Python bindings for the temporal-preservation network pipeline: presets
//! and forward inference, per-frame score matrices, segment extraction
//! (refinement, frame grouping, suppression), and the two evaluation
//! protocols. Data crosses the boundary as flat `list[float]` plus explicit
//! shapes; segments as `(video_id, start, end, class_id, confidence)` tuples.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tpc_core::arch::{build_preset, MiniScale, PRESET_NAMES};
use tpc_core::cli::predict_video;
use tpc_core::error::Error;
use tpc_core::eval::{frame_level_map, segment_level_map};
use tpc_core::localize::{
    classify_proposal, fgm, interpolate_scores, nms, refine_boundaries, FrameScoreMatrix, Segment,
};
use tpc_core::network::Network;
use tpc_core::tensor::Tensor;
use tpc_core::train::load_checkpoint;

fn err(e: Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

type SegmentTuple = (String, usize, usize, usize, f64);

fn to_segment(t: &SegmentTuple) -> Segment {
    Segment {
        video_id: t.0.clone(),
        start_frame: t.1,
        end_frame: t.2,
        class_id: t.3,
        confidence: t.4,
    }
}

fn from_segment(s: &Segment) -> SegmentTuple {
    (
        s.video_id.clone(),
        s.start_frame,
        s.end_frame,
        s.class_id,
        s.confidence,
    )
}

/// Per-frame class probabilities of one video: `frames` rows of `classes`
/// scores, each row summing to one.
#[pyclass(name = "ScoreMatrix")]
#[derive(Clone)]
struct PyScoreMatrix {
    inner: FrameScoreMatrix,
}

#[pymethods]
impl PyScoreMatrix {
    #[new]
    fn new(video_id: &str, frames: usize, classes: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyScoreMatrix {
            inner: FrameScoreMatrix::new(video_id, frames, classes, data).map_err(err)?,
        })
    }

    #[getter]
    fn video_id(&self) -> String {
        self.inner.video_id().to_string()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    /// Scores of one frame, background first.
    fn row(&self, t: usize) -> PyResult<Vec<f64>> {
        if t >= self.inner.frames() {
            return Err(PyValueError::new_err(format!(
                "frame {t} out of range 0..{}",
                self.inner.frames()
            )));
        }
        Ok(self.inner.row(t).to_vec())
    }

    fn score(&self, t: usize, class: usize) -> PyResult<f64> {
        if t >= self.inner.frames() || class >= self.inner.classes() {
            return Err(PyValueError::new_err("frame or class out of range"));
        }
        Ok(self.inner.score(t, class))
    }

    /// Linearly interpolate to `factor` times the frame rate; rows stay
    /// probability distributions.
    fn interpolate(&self, factor: usize) -> PyResult<PyScoreMatrix> {
        Ok(PyScoreMatrix {
            inner: interpolate_scores(&self.inner, factor).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str, video_id: &str) -> PyResult<PyScoreMatrix> {
        Ok(PyScoreMatrix {
            inner: FrameScoreMatrix::load(Path::new(path), video_id.to_string()).map_err(err)?,
        })
    }
}

/// A trained (or freshly initialized) network built from a named preset.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// Initialize from a preset with random weights.
    #[new]
    #[pyo3(signature = (preset, classes=4, seed=0, length=32, spatial=32))]
    fn new(preset: &str, classes: usize, seed: u64, length: usize, spatial: usize) -> PyResult<Self> {
        let scale = MiniScale {
            input_length: length,
            input_spatial: spatial,
            ..MiniScale::default()
        };
        let spec = build_preset(preset, classes, scale).map_err(err)?;
        Ok(PyNetwork {
            inner: Network::init(spec, seed).map_err(err)?,
        })
    }

    /// Load a trained checkpoint directory.
    #[staticmethod]
    fn load(checkpoint_dir: &str) -> PyResult<PyNetwork> {
        Ok(PyNetwork {
            inner: load_checkpoint(Path::new(checkpoint_dir)).map_err(err)?,
        })
    }

    #[getter]
    fn preset(&self) -> String {
        self.inner.spec().name.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec().num_classes
    }

    /// Input shape (C, L, H, W) of one window.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize, usize) {
        let [c, l, h, w] = self.inner.spec().input_shape;
        (c, l, h, w)
    }

    /// Factor by which emitted scores must be upsampled to reach one score
    /// per input frame (1 for temporal-preservation presets).
    #[getter]
    fn score_upsample_factor(&self) -> usize {
        self.inner.spec().score_upsample_factor
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Raw class scores of one batch of windows. `data` is a flat
    /// (N, C, L, H, W) array; returns the flat (N, K+1, L') scores and L'.
    fn forward(&self, data: Vec<f64>, shape: (usize, usize, usize, usize, usize)) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        let (n, c, l, h, w) = shape;
        let input = Tensor::new(vec![n, c, l, h, w], data).map_err(err)?;
        let scores = self.inner.logits(&input).map_err(err)?;
        let s = scores.shape().to_vec();
        Ok((scores.data().to_vec(), (s[0], s[1], s[2])))
    }

    /// Slide over a whole (C, L, H, W) video and return per-frame
    /// probabilities at full frame rate.
    fn predict(&self, video_id: &str, data: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<PyScoreMatrix> {
        let (c, l, h, w) = shape;
        let video = Tensor::new(vec![c, l, h, w], data).map_err(err)?;
        Ok(PyScoreMatrix {
            inner: predict_video(&self.inner, video_id, &video).map_err(err)?,
        })
    }

    /// Per-layer geometry: (name, kind, output (C,L,H,W), temporal rate,
    /// receptive-field extent, receptive-field stride).
    fn shapes(&self) -> PyResult<Vec<(String, String, (usize, usize, usize, usize), usize, usize, usize)>> {
        use tpc_core::arch::LayerSpec;
        let spec = self.inner.spec();
        let shapes = spec.infer_shapes().map_err(err)?;
        let mut rows = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let (kind, rate) = match layer {
                LayerSpec::Conv { temporal_rate, .. } => ("conv", *temporal_rate),
                LayerSpec::Pool { temporal_rate, .. } => ("pool", *temporal_rate),
                LayerSpec::Gap { .. } => ("gap", 1),
                LayerSpec::Classifier { .. } => ("classifier", 1),
            };
            let rf = spec.temporal_receptive_field(i).map_err(err)?;
            let [c, l, h, w] = shapes[i];
            rows.push((
                layer.name().to_string(),
                kind.to_string(),
                (c, l, h, w),
                rate,
                rf.extent_frames,
                rf.stride_frames,
            ));
        }
        Ok(rows)
    }
}

/// Names of the built-in architecture presets.
#[pyfunction]
fn presets() -> Vec<String> {
    PRESET_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Overlap of two inclusive frame spans as intersection over union.
#[pyfunction]
fn iou(a: (usize, usize), b: (usize, usize)) -> PyResult<f64> {
    if a.0 > a.1 || b.0 > b.1 {
        return Err(PyValueError::new_err("segment start must not exceed end"));
    }
    let sa = Segment {
        video_id: String::new(),
        start_frame: a.0,
        end_frame: a.1,
        class_id: 0,
        confidence: 1.0,
    };
    let sb = Segment {
        video_id: String::new(),
        start_frame: b.0,
        end_frame: b.1,
        class_id: 0,
        confidence: 1.0,
    };
    Ok(tpc_core::eval::iou(&sa, &sb))
}

/// Group frames whose class score clears each threshold into segments
/// (runs of at least `min_len` frames), pooled over all thresholds.
#[pyfunction]
#[pyo3(signature = (scores, thresholds=None, min_len=1))]
fn group_frames(scores: &PyScoreMatrix, thresholds: Option<Vec<f64>>, min_len: usize) -> PyResult<Vec<SegmentTuple>> {
    let taus = thresholds.unwrap_or_else(|| (1..=9).map(|i| i as f64 / 10.0).collect());
    let segs = fgm(&scores.inner, &taus, min_len).map_err(err)?;
    Ok(segs.iter().map(from_segment).collect())
}

/// Assign a proposal the class with the highest mean score; background wins
/// return None.
#[pyfunction]
fn classify(scores: &PyScoreMatrix, start: usize, end: usize) -> PyResult<Option<SegmentTuple>> {
    let seg = classify_proposal(scores.inner.video_id(), start, end, &scores.inner).map_err(err)?;
    Ok(seg.as_ref().map(from_segment))
}

/// Trim a classified segment to the frames scoring at least `threshold` for
/// its class; returns None if no frame survives.
#[pyfunction]
fn refine(scores: &PyScoreMatrix, segment: SegmentTuple, threshold: f64) -> PyResult<Option<SegmentTuple>> {
    let seg = to_segment(&segment);
    let refined = refine_boundaries(&seg, &scores.inner, threshold).map_err(err)?;
    Ok(refined.as_ref().map(from_segment))
}

/// Per-class non-maximum suppression over detection tuples.
#[pyfunction]
#[pyo3(signature = (detections, overlap=0.4))]
fn suppress(detections: Vec<SegmentTuple>, overlap: f64) -> PyResult<Vec<SegmentTuple>> {
    let segs: Vec<Segment> = detections.iter().map(to_segment).collect();
    let kept = nms(&segs, overlap).map_err(err)?;
    Ok(kept.iter().map(from_segment).collect())
}

/// Frame-level mAP: per-class average precision over all frames of all
/// videos, ranked by score. `labels` maps video id to per-frame class ids
/// (0 = background). Returns (per_class AP or None, mAP or None).
#[pyfunction]
fn frame_map(
    scores: Vec<PyScoreMatrix>,
    labels: BTreeMap<String, Vec<usize>>,
    num_classes: usize,
) -> PyResult<(Vec<(usize, Option<f64>)>, Option<f64>)> {
    let matrices: Vec<FrameScoreMatrix> = scores.iter().map(|s| s.inner.clone()).collect();
    let report = frame_level_map(&matrices, &labels, num_classes).map_err(err)?;
    Ok((
        report.per_class.iter().map(|c| (c.class_id, c.ap)).collect(),
        report.map,
    ))
}

/// Segment-level mAP at each IoU threshold. Ground-truth tuples reuse the
/// detection layout with confidence ignored. Returns a list of
/// (threshold, mAP or None).
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, thresholds=None))]
fn segment_map(
    detections: Vec<SegmentTuple>,
    ground_truth: Vec<SegmentTuple>,
    thresholds: Option<Vec<f64>>,
) -> PyResult<Vec<(f64, Option<f64>)>> {
    let dets: Vec<Segment> = detections.iter().map(to_segment).collect();
    let truth: Vec<Segment> = ground_truth.iter().map(to_segment).collect();
    let taus = thresholds.unwrap_or_else(|| vec![0.3, 0.4, 0.5, 0.6, 0.7]);
    let report = segment_level_map(&dets, &truth, &taus).map_err(err)?;
    Ok(report
        .per_threshold
        .iter()
        .map(|t| (t.iou_threshold, t.map))
        .collect())
}

#[pymodule]
fn tpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScoreMatrix>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(group_frames, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(suppress, m)?)?;
    m.add_function(wrap_pyfunction!(frame_map, m)?)?;
    m.add_function(wrap_pyfunction!(segment_map, m)?)?;
    Ok(())
}
