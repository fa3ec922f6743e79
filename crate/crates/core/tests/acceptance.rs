//! Release gate: nine end-to-end checks covering temporal resolution,
//! receptive-field design, dilation algebra, gradients, training sanity, the
//! benchmark ordering between the temporal-preserving network and the
//! interpolated baseline, the two localization modes, evaluation arithmetic,
//! and bitwise determinism.
//!
//! Runs as a plain binary (no test harness) so each criterion prints exactly
//! one pass/fail line on stdout; progress notes for the long-running steps go
//! to stderr. The process exits nonzero if any hard criterion fails;
//! criterion 7 is informational only and never gates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpc_core::arch::{build_preset, LayerSpec, MiniScale, NetworkSpec};
use tpc_core::cli::{
    cmd_localize, cmd_predict, cmd_synth, cmd_train, LocalizeMode, LocalizeOptions,
    PredictOptions, SynthOptions, TrainOptions, DEFAULT_FGM_THRESHOLDS,
};
use tpc_core::eval::{average_precision, frame_level_map, iou, segment_level_map};
use tpc_core::formats::{read_annotations, read_segments};
use tpc_core::localize::{FrameScoreMatrix, Segment};
use tpc_core::network::{squeeze_scores, Network};
use tpc_core::ops::{conv3d_forward, per_frame_softmax_loss, ConvParams};
use tpc_core::tensor::Tensor;
use tpc_core::train::{
    build_windows, resume_training, train, label_frames, Schedule, WindowSample,
};

#[path = "util/mod.rs"]
mod util;

macro_rules! t {
    ($e:expr) => {
        $e.map_err(|e| format!("error: {e}"))?
    };
}

fn main() {
    let started = Instant::now();
    let work = tempfile::tempdir().expect("create scratch directory");
    let mut failed: Vec<usize> = Vec::new();

    report(1, "temporal resolution", criterion1(), &mut failed);
    report(2, "receptive-field match", criterion2(), &mut failed);
    report(3, "dilation residue decomposition", criterion3(), &mut failed);
    report(4, "gradient checks", criterion4(), &mut failed);
    report(5, "loss sanity and overfit", criterion5(work.path()), &mut failed);
    let bench = criterion6(work.path());
    match &bench {
        Ok((detail, _)) => report(6, "benchmark ordering", Ok(detail.clone()), &mut failed),
        Err(e) => report(6, "benchmark ordering", Err(e.clone()), &mut failed),
    }
    match &bench {
        Ok((_, artifacts)) => {
            println!("criterion 7 grouping vs refinement: {}", criterion7(work.path(), artifacts));
        }
        Err(_) => {
            println!("criterion 7 grouping vs refinement: SKIPPED — needs the criterion 6 model");
        }
    }
    report(8, "evaluation arithmetic", criterion8(), &mut failed);
    report(9, "bitwise reruns", criterion9(work.path()), &mut failed);

    let minutes = started.elapsed().as_secs_f64() / 60.0;
    if failed.is_empty() {
        println!("acceptance: all hard criteria passed in {minutes:.1} min");
    } else {
        println!("acceptance: hard criteria failed: {failed:?} (total {minutes:.1} min)");
        std::process::exit(1);
    }
}

fn report(n: usize, label: &str, outcome: Result<String, String>, failed: &mut Vec<usize>) {
    match outcome {
        Ok(detail) => println!("criterion {n} {label}: PASS — {detail}"),
        Err(detail) => {
            println!("criterion {n} {label}: FAIL — {detail}");
            failed.push(n);
        }
    }
}

fn scale_with_length(l: usize) -> MiniScale {
    MiniScale {
        input_length: l,
        ..MiniScale::default()
    }
}

// ---------------------------------------------------------------------------
// 1. The dilated stack keeps the temporal axis at full length everywhere; the
//    reference stack divides it by 16 (its padded pools bottom out at one
//    frame once the axis is shorter than the reduction factor).
fn criterion1() -> Result<String, String> {
    let mut checked = 0usize;
    for l in [8usize, 16, 32, 64] {
        let tpc = t!(build_preset("tpc-mini", 4, scale_with_length(l)));
        let shapes = t!(tpc.infer_shapes());
        for (i, s) in shapes.iter().enumerate() {
            if s[1] != l {
                return Err(format!(
                    "tpc-mini layer {} emits temporal length {} for input length {l}",
                    tpc.layers[i].name(),
                    s[1]
                ));
            }
        }
        checked += shapes.len();
        let c3d = t!(build_preset("c3d-mini", 4, scale_with_length(l)));
        let final_len = t!(c3d.infer_shapes()).last().unwrap()[1];
        let expected = if l >= 16 { l / 16 } else { 1 };
        if final_len != expected {
            return Err(format!(
                "c3d-mini ends with temporal length {final_len} for input {l}, expected {expected}"
            ));
        }
    }
    Ok(format!(
        "tpc-mini keeps L at all {checked} layer outputs for L in {{8,16,32,64}}; c3d-mini ends \
         at L/16 (16->1, 32->2, 64->4) and floors at one frame for L=8, where L/16 is below a \
         whole frame"
    ))
}

// ---------------------------------------------------------------------------
// 2. Exact input-frame footprints: every temporal position of stages 3-5 in
//    the dilated stack sees the same set of input frames as the aligned
//    position of the downsampling stack.

/// Set of input frames feeding each temporal position of layer `upto`,
/// computed by propagating index sets through every temporal kernel.
fn temporal_footprints(spec: &NetworkSpec, upto: usize) -> Result<Vec<BTreeSet<usize>>, String> {
    let shapes = t!(spec.infer_shapes());
    let mut sets: Vec<BTreeSet<usize>> = (0..spec.input_shape[1])
        .map(|t| BTreeSet::from([t]))
        .collect();
    for (i, layer) in spec.layers.iter().enumerate().take(upto + 1) {
        let (kt, st, pt, r) = match layer {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                temporal_rate,
                ..
            }
            | LayerSpec::Pool {
                kernel,
                stride,
                padding,
                temporal_rate,
                ..
            } => (kernel[0], stride[0], padding[0], *temporal_rate),
            LayerSpec::Gap { .. } => continue, // spatial only
            LayerSpec::Classifier { kernel, .. } => (kernel[0], 1, 0, 1),
        };
        let in_len = sets.len() as i64;
        sets = (0..shapes[i][1])
            .map(|o| {
                let mut s = BTreeSet::new();
                for tap in 0..kt {
                    let pos = (o * st + tap * r) as i64 - pt as i64;
                    if (0..in_len).contains(&pos) {
                        s.extend(&sets[pos as usize]);
                    }
                }
                s
            })
            .collect();
    }
    Ok(sets)
}

fn criterion2() -> Result<String, String> {
    let tpc = t!(build_preset("tpc-mini", 4, MiniScale::default()));
    let c3d = t!(build_preset("c3d-mini", 4, MiniScale::default()));
    let layers = [
        "conv3a", "conv3b", "pool3", "conv4a", "conv4b", "pool4", "conv5a", "conv5b", "pool5",
    ];
    let mut compared = 0usize;
    for name in layers {
        let ti = tpc
            .layer_index(name)
            .ok_or_else(|| format!("tpc-mini has no layer {name}"))?;
        let ci = c3d
            .layer_index(name)
            .ok_or_else(|| format!("c3d-mini has no layer {name}"))?;
        let tf = temporal_footprints(&tpc, ti)?;
        let cf = temporal_footprints(&c3d, ci)?;
        if cf.is_empty() || tf.len() % cf.len() != 0 {
            return Err(format!(
                "{name}: {} dilated positions cannot align with {} reference positions",
                tf.len(),
                cf.len()
            ));
        }
        let stride = tf.len() / cf.len();
        for (j, reference) in cf.iter().enumerate() {
            let dilated = &tf[j * stride];
            if reference != dilated {
                return Err(format!(
                    "{name} position {j}: reference sees input frames {reference:?} but the \
                     dilated stack sees {dilated:?}"
                ));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "stages 3-5 see identical input-frame sets at every aligned position \
         ({compared} positions over {} layers, L=32)",
        layers.len()
    ))
}

// ---------------------------------------------------------------------------
// 3. Residue decomposition: a convolution that samples time every r frames,
//    restricted to one residue class mod r, is the plain convolution of the
//    subsampled sequence.
fn criterion3() -> Result<String, String> {
    let mut max_dev = 0.0f64;
    let mut values = 0usize;
    for r in [1usize, 2, 4, 8] {
        for l in [24usize, 23] {
            let x = util::rng_tensor(&[2, 3, l, 6, 6], 900 + r as u64);
            let w = util::rng_tensor(&[4, 3, 3, 3, 3], 910 + r as u64);
            let b = util::rng_tensor(&[4], 920 + r as u64);
            let dilated = t!(ConvParams::new(
                w.clone(),
                b.clone(),
                r,
                (r, 1, 1),
                (1, 1, 1)
            ));
            let y = t!(conv3d_forward(&x, &dilated));
            let plain = t!(ConvParams::new(
                w.clone(),
                b.clone(),
                1,
                (1, 1, 1),
                (1, 1, 1)
            ));
            for rho in 0..r {
                let m = (l - rho).div_ceil(r);
                let mut sub = Tensor::zeros(&[2, 3, m, 6, 6]);
                for n in 0..2 {
                    for c in 0..3 {
                        for i in 0..m {
                            for h in 0..6 {
                                for v in 0..6 {
                                    sub.set(&[n, c, i, h, v], x.at(&[n, c, rho + i * r, h, v]));
                                }
                            }
                        }
                    }
                }
                let ys = t!(conv3d_forward(&sub, &plain));
                for n in 0..2 {
                    for oc in 0..4 {
                        for i in 0..m {
                            for h in 0..6 {
                                for v in 0..6 {
                                    let dev = (ys.at(&[n, oc, i, h, v])
                                        - y.at(&[n, oc, rho + i * r, h, v]))
                                    .abs();
                                    max_dev = max_dev.max(dev);
                                    values += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if max_dev > 1e-12 {
        return Err(format!(
            "residue decomposition deviates by {max_dev:.3e} (tolerance 1e-12)"
        ));
    }
    Ok(format!(
        "rates {{1,2,4,8}} decompose into residue-class convolutions on lengths 24 and 23 \
         ({values} values, max deviation {max_dev:.1e})"
    ))
}

// ---------------------------------------------------------------------------
// 4. Every differentiable primitive against central finite differences.
fn criterion4() -> Result<String, String> {
    let t0 = Instant::now();
    let reports = util::gradcheck_all();
    let elapsed = t0.elapsed().as_secs_f64();
    let instances: usize = reports.iter().map(|r| r.instances).sum();
    for r in &reports {
        if !(r.max_rel_err < 1e-4) {
            return Err(format!(
                "{}: max relative error {:.3e} is not below 1e-4",
                r.name, r.max_rel_err
            ));
        }
    }
    if instances < 20 {
        return Err(format!("only {instances} instances checked, need at least 20"));
    }
    if elapsed >= 60.0 {
        return Err(format!("took {elapsed:.1} s, budget is one minute"));
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    Ok(format!(
        "{} primitive families, {instances} instances, worst relative error {:.1e} ({}), {elapsed:.1} s",
        reports.len(),
        worst.max_rel_err,
        worst.name
    ))
}

// ---------------------------------------------------------------------------
// 5. A freshly initialized network is maximally uncertain (loss ln 5 for four
//    action classes plus background) and the optimizer can drive a 10-window
//    set below 0.05 within 200 epochs.
fn criterion5(work: &Path) -> Result<String, String> {
    let data = work.join("sanity");
    t!(cmd_synth(&SynthOptions {
        out: data.clone(),
        seed: 11,
        classes: 4,
        train_videos: 4,
        test_videos: 1,
        frames: 160,
        spatial: 32,
        min_len: 16,
        max_len: 24,
        min_instances: 2,
        max_instances: 3,
        noise: 0.1,
        jitter: 4,
    }));
    let videos = load_split_videos(&data.join("train"))?;
    let annotations = t!(read_annotations(data.join("train/annotations.csv")));
    let mut windows = t!(build_windows(&videos, &annotations, 32, 32));
    if windows.len() < 10 {
        return Err(format!(
            "sanity dataset produced only {} labeled windows, need 10",
            windows.len()
        ));
    }
    windows.truncate(10);

    let spec = t!(build_preset("tpc-mini", 4, MiniScale::default()));
    let fresh = t!(Network::init(spec.clone(), 0));
    let (input, labels) = batch_of(&windows)?;
    let logits = t!(squeeze_scores(t!(fresh.forward(&input))));
    let (initial, _) = t!(per_frame_softmax_loss(&logits, &labels));
    let ln5 = 5.0f64.ln();
    if (initial - ln5).abs() / ln5 > 0.05 {
        return Err(format!(
            "initial loss {initial:.4} differs from ln 5 = {ln5:.4} by more than 5%"
        ));
    }

    eprintln!("  [5] overfitting a 10-window set (up to 200 epochs)...");
    let out = work.join("sanity-run");
    let mut schedule = Schedule {
        stage1_lr: 3e-3,
        stage2_lr: 3e-3,
        momentum: 0.9,
        weight_decay: 5e-4,
        stage1_epochs: 3,
        stage2_epochs: 22,
        batch_size: 2,
        seed: 0,
    };
    let mut last = f64::INFINITY;
    let mut epochs_done = 0usize;
    loop {
        let (_, report) = if epochs_done == 0 {
            t!(train(&spec, &windows, &schedule, &out))
        } else {
            schedule.stage2_epochs += 25;
            t!(resume_training(&windows, &schedule, &out))
        };
        if let Some(record) = report.epochs.last() {
            last = record.loss;
            epochs_done = record.epoch;
        }
        eprintln!("  [5] epoch {epochs_done}: loss {last:.4}");
        if last < 0.05 || epochs_done >= 200 {
            break;
        }
    }
    if last >= 0.05 {
        return Err(format!(
            "loss only reached {last:.4} after {epochs_done} epochs, need < 0.05 within 200"
        ));
    }
    Ok(format!(
        "initial loss {initial:.4} vs ln 5 = {ln5:.4} ({:+.2}%); overfit to {last:.4} by epoch {epochs_done}",
        (initial - ln5) / ln5 * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 6. The headline comparison at desk scale: on the default seed-7 benchmark
//    the temporal-preserving network must beat the downsample-then-interpolate
//    baseline by at least 3 frame-mAP points, reach 0.85 absolute, and keep
//    the same ordering for segment mAP at IoU 0.5 in both localization modes,
//    all within the 15-minute budget.
struct BenchArtifacts {
    bench: PathBuf,
    tpc_scores: PathBuf,
    tpc_fgm: PathBuf,
}

fn criterion6(work: &Path) -> Result<(String, BenchArtifacts), String> {
    let t0 = Instant::now();
    let bench = work.join("bench");
    eprintln!("  [6] generating the seed-7 benchmark dataset...");
    t!(cmd_synth(&SynthOptions {
        out: bench.clone(),
        seed: 7,
        classes: 4,
        train_videos: 24,
        test_videos: 8,
        frames: 256,
        spatial: 32,
        min_len: 16,
        max_len: 40,
        min_instances: 3,
        max_instances: 5,
        noise: 0.1,
        jitter: 4,
    }));
    let schedule = Schedule {
        stage1_lr: 3e-3,
        stage2_lr: 3e-3,
        momentum: 0.9,
        weight_decay: 5e-4,
        stage1_epochs: 3,
        stage2_epochs: 22,
        batch_size: 4,
        seed: 0,
    };
    let annotations_path = bench.join("test/annotations.csv");
    let proposals_path = bench.join("test/proposals.csv");
    let annotations = t!(read_annotations(&annotations_path));
    let truth: Vec<Segment> = annotations.iter().map(|a| a.to_segment()).collect();

    let mut frame_maps: BTreeMap<&str, f64> = BTreeMap::new();
    let mut seg_maps: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut paths: BTreeMap<&str, (PathBuf, PathBuf)> = BTreeMap::new();
    for preset in ["tpc-mini", "interp-baseline"] {
        let run = work.join(format!("run-{preset}"));
        eprintln!("  [6] training {preset} (3 head-only + 22 full epochs)...");
        t!(cmd_train(&TrainOptions {
            data: bench.join("train"),
            out: run.clone(),
            preset: preset.into(),
            classes: None,
            window_len: 32,
            window_stride: 32,
            balance_target: None,
            schedule: schedule.clone(),
            resume: false,
        }));
        let scores = run.join("scores");
        t!(cmd_predict(&PredictOptions {
            data: bench.join("test"),
            checkpoint: run.clone(),
            out: scores.clone(),
            preset: None,
        }));

        let matrices = load_score_dir(&scores)?;
        let mut labels = BTreeMap::new();
        for m in &matrices {
            labels.insert(
                m.video_id().to_string(),
                t!(label_frames(&annotations, m.video_id(), m.frames())),
            );
        }
        let fmap = t!(frame_level_map(&matrices, &labels, 4))
            .map
            .ok_or_else(|| "frame mAP undefined: no positive frames".to_string())?;
        frame_maps.insert(preset, fmap);

        for mode in ["refine", "fgm"] {
            let det = run.join(format!("detections-{mode}.csv"));
            t!(cmd_localize(&LocalizeOptions {
                scores: scores.clone(),
                out: det.clone(),
                mode: if mode == "refine" {
                    LocalizeMode::Refine
                } else {
                    LocalizeMode::Fgm
                },
                proposals: (mode == "refine").then(|| proposals_path.clone()),
                annotations: (mode == "refine").then(|| annotations_path.clone()),
                nms: 0.4,
                threshold: None,
                fgm_thresholds: DEFAULT_FGM_THRESHOLDS.to_vec(),
                min_len: 1,
            }));
            let report = t!(segment_level_map(&t!(read_segments(&det)), &truth, &[0.5]));
            let map = report.per_threshold[0]
                .map
                .ok_or_else(|| "segment mAP undefined: no ground truth".to_string())?;
            seg_maps.insert((preset, mode), map);
        }
        paths.insert(preset, (scores, run.join("detections-fgm.csv")));
    }

    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let tpc_f = frame_maps["tpc-mini"];
    let itp_f = frame_maps["interp-baseline"];
    let mut problems = Vec::new();
    if tpc_f < itp_f + 0.03 {
        problems.push(format!(
            "frame mAP lead is only {:.1} points, need 3",
            (tpc_f - itp_f) * 100.0
        ));
    }
    if tpc_f < 0.85 {
        problems.push(format!("tpc-mini frame mAP {tpc_f:.4} is below 0.85"));
    }
    for mode in ["refine", "fgm"] {
        let a = seg_maps[&("tpc-mini", mode)];
        let b = seg_maps[&("interp-baseline", mode)];
        if a <= b {
            problems.push(format!(
                "segment mAP at IoU 0.5 in {mode} mode: tpc-mini {a:.4} does not beat \
                 interp-baseline {b:.4}"
            ));
        }
    }
    if minutes > 15.0 {
        problems.push(format!("took {minutes:.1} min, budget is 15"));
    }
    let detail = format!(
        "frame mAP tpc-mini {tpc_f:.4} vs interp-baseline {itp_f:.4} (lead {:+.1} pts); \
         segment mAP at IoU 0.5: refine {:.4} vs {:.4}, fgm {:.4} vs {:.4}; {minutes:.1} min \
         on {cores} core(s) against a 15-min/4-core budget",
        (tpc_f - itp_f) * 100.0,
        seg_maps[&("tpc-mini", "refine")],
        seg_maps[&("interp-baseline", "refine")],
        seg_maps[&("tpc-mini", "fgm")],
        seg_maps[&("interp-baseline", "fgm")],
    );
    if !problems.is_empty() {
        return Err(format!("{} [{detail}]", problems.join("; ")));
    }
    let (tpc_scores, tpc_fgm) = paths.remove("tpc-mini").unwrap();
    Ok((
        detail,
        BenchArtifacts {
            bench,
            tpc_scores,
            tpc_fgm,
        },
    ))
}

// ---------------------------------------------------------------------------
// 7. Informational: with sloppier (jitter-8) proposals, frame grouping is
//    expected to beat proposal refinement at IoU 0.5-0.7. Reported either
//    way; a regression is flagged but never fails the gate.
fn criterion7(work: &Path, art: &BenchArtifacts) -> String {
    match criterion7_inner(work, art) {
        Ok((refine, fgm)) => {
            let fmt = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x:.4}"))
                    .collect::<Vec<_>>()
                    .join("/")
            };
            if refine.iter().zip(&fgm).any(|(r, f)| f < r) {
                format!(
                    "SOFT FAIL (reported, does not gate) — with jitter-8 proposals, grouping \
                     segment mAP {} vs refinement {} at IoU 0.5/0.6/0.7: refinement still leads \
                     at this scale because the sharp per-frame scores recover the boundaries \
                     proposals lose",
                    fmt(&fgm),
                    fmt(&refine)
                )
            } else {
                format!(
                    "PASS — grouping segment mAP {} at or above refinement {} at IoU 0.5/0.6/0.7 \
                     with jitter-8 proposals",
                    fmt(&fgm),
                    fmt(&refine)
                )
            }
        }
        Err(e) => format!("SOFT FAIL (reported, does not gate) — {e}"),
    }
}

fn criterion7_inner(work: &Path, art: &BenchArtifacts) -> Result<(Vec<f64>, Vec<f64>), String> {
    eprintln!("  [7] regenerating proposals with jitter 8...");
    let j8 = work.join("bench-jitter8");
    t!(cmd_synth(&SynthOptions {
        out: j8.clone(),
        seed: 7,
        classes: 4,
        train_videos: 24,
        test_videos: 8,
        frames: 256,
        spatial: 32,
        min_len: 16,
        max_len: 40,
        min_instances: 3,
        max_instances: 5,
        noise: 0.1,
        jitter: 8,
    }));
    let annotations_path = art.bench.join("test/annotations.csv");
    let det = work.join("detections-refine-jitter8.csv");
    t!(cmd_localize(&LocalizeOptions {
        scores: art.tpc_scores.clone(),
        out: det.clone(),
        mode: LocalizeMode::Refine,
        proposals: Some(j8.join("test/proposals.csv")),
        annotations: Some(annotations_path.clone()),
        nms: 0.4,
        threshold: None,
        fgm_thresholds: DEFAULT_FGM_THRESHOLDS.to_vec(),
        min_len: 1,
    }));
    let truth: Vec<Segment> = t!(read_annotations(&annotations_path))
        .iter()
        .map(|a| a.to_segment())
        .collect();
    let taus = [0.5, 0.6, 0.7];
    let maps_of = |file: &Path| -> Result<Vec<f64>, String> {
        let report = t!(segment_level_map(&t!(read_segments(file)), &truth, &taus));
        Ok(report
            .per_threshold
            .iter()
            .map(|t| t.map.unwrap_or(0.0))
            .collect())
    };
    Ok((maps_of(&det)?, maps_of(&art.tpc_fgm)?))
}

// ---------------------------------------------------------------------------
// 8. Evaluation arithmetic: hand-computed AP and IoU values to 1e-12, and
//    segment mAP never rises as the IoU threshold tightens.
fn criterion8() -> Result<String, String> {
    let ap_half = average_precision(&[false, true], 1)
        .ok_or_else(|| "AP undefined for one positive".to_string())?;
    if (ap_half - 0.5).abs() > 1e-12 {
        return Err(format!(
            "one positive ranked second of two gives AP {ap_half}, want exactly 0.5"
        ));
    }
    let ap_one = average_precision(&[true, true, false], 2)
        .ok_or_else(|| "AP undefined for two positives".to_string())?;
    if (ap_one - 1.0).abs() > 1e-12 {
        return Err(format!("perfect ranking gives AP {ap_one}, want exactly 1.0"));
    }
    let overlap = iou(&seg("v", 0, 10, 1, 1.0), &seg("v", 5, 15, 1, 1.0));
    if (overlap - 0.375).abs() > 1e-12 {
        return Err(format!(
            "inclusive ranges [0,10] and [5,15] give IoU {overlap}, want exactly 0.375"
        ));
    }

    let taus = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for trial in 0..25 {
        let mut truth = Vec::new();
        for class in 1..=3usize {
            for _ in 0..rng.gen_range(1..=3) {
                let start = rng.gen_range(0..180);
                truth.push(seg("v", start, start + rng.gen_range(2..30), class, 1.0));
            }
        }
        let mut detections = Vec::new();
        for _ in 0..rng.gen_range(5..=15) {
            let start = rng.gen_range(0..180);
            detections.push(seg(
                "v",
                start,
                start + rng.gen_range(2..30),
                rng.gen_range(1..=3),
                rng.gen::<f64>(),
            ));
        }
        let report = t!(segment_level_map(&detections, &truth, &taus));
        let maps: Vec<f64> = report
            .per_threshold
            .iter()
            .map(|t| t.map.unwrap_or(0.0))
            .collect();
        for w in maps.windows(2) {
            if w[1] > w[0] + 1e-12 {
                return Err(format!(
                    "trial {trial}: segment mAP rose from {:.6} to {:.6} as the IoU threshold \
                     tightened",
                    w[0], w[1]
                ));
            }
        }
    }
    Ok(
        "AP hand cases exact (0.5 and 1.0), IoU of [0,10] vs [5,15] exactly 0.375; segment mAP \
         non-increasing over 9 thresholds on 25 random detection sets"
            .into(),
    )
}

fn seg(video: &str, start: usize, end: usize, class: usize, confidence: f64) -> Segment {
    Segment {
        video_id: video.into(),
        start_frame: start,
        end_frame: end,
        class_id: class,
        confidence,
    }
}

// ---------------------------------------------------------------------------
// 9. Rerunning synth, train, and predict with the same seeds reproduces every
//    artifact byte for byte.
fn criterion9(work: &Path) -> Result<String, String> {
    eprintln!("  [9] running the pipeline twice at small scale...");
    let mut trees = Vec::new();
    for run in ["first", "second"] {
        let root = work.join(format!("rerun-{run}"));
        let data = root.join("data");
        t!(cmd_synth(&SynthOptions {
            out: data.clone(),
            seed: 3,
            classes: 4,
            train_videos: 3,
            test_videos: 2,
            frames: 64,
            spatial: 32,
            min_len: 10,
            max_len: 16,
            min_instances: 1,
            max_instances: 2,
            noise: 0.1,
            jitter: 4,
        }));
        t!(cmd_train(&TrainOptions {
            data: data.join("train"),
            out: root.join("model"),
            preset: "tpc-mini".into(),
            classes: None,
            window_len: 32,
            window_stride: 32,
            balance_target: None,
            schedule: Schedule {
                stage1_lr: 3e-3,
                stage2_lr: 3e-3,
                momentum: 0.9,
                weight_decay: 5e-4,
                stage1_epochs: 1,
                stage2_epochs: 1,
                batch_size: 4,
                seed: 0,
            },
            resume: false,
        }));
        t!(cmd_predict(&PredictOptions {
            data: data.join("test"),
            checkpoint: root.join("model"),
            out: root.join("scores"),
            preset: None,
        }));
        trees.push(tree_bytes(&root, &root)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    if !a.keys().eq(b.keys()) {
        let only_a: Vec<&String> = a.keys().filter(|k| !b.contains_key(*k)).collect();
        let only_b: Vec<&String> = b.keys().filter(|k| !a.contains_key(*k)).collect();
        return Err(format!(
            "file sets differ: only in first run {only_a:?}, only in second {only_b:?}"
        ));
    }
    let mut bytes = 0usize;
    let mut files = 0usize;
    for (path, first) in a {
        if path == "data/config.toml" {
            continue; // records its own output directory, which differs by run
        }
        if first != &b[path] {
            return Err(format!("{path} differs between identical reruns"));
        }
        bytes += first.len();
        files += 1;
    }
    Ok(format!(
        "synth + train + predict reruns bitwise-identical: {files} artifacts, {bytes} bytes \
         (config.toml compared for presence only; it records its own output path)"
    ))
}

// ------------------------------------------------------------------ helpers

fn load_split_videos(split: &Path) -> Result<Vec<(String, Tensor)>, String> {
    let dir = split.join("videos");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| format!("error: cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "blob"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.push((id, t!(Tensor::load(&p))));
    }
    Ok(out)
}

fn load_score_dir(dir: &Path) -> Result<Vec<FrameScoreMatrix>, String> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("error: cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "blob"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        out.push(t!(FrameScoreMatrix::load(&p, id)));
    }
    Ok(out)
}

/// Stack windows into one batch with one-hot per-frame labels (4 classes
/// plus background).
fn batch_of(windows: &[WindowSample]) -> Result<(Tensor, Tensor), String> {
    let shape = windows[0].clip.shape().to_vec();
    let (c, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = windows.len();
    let mut data = Vec::with_capacity(n * c * l * h * w);
    let mut labels = Tensor::zeros(&[n, 5, l]);
    for (bi, sample) in windows.iter().enumerate() {
        data.extend_from_slice(sample.clip.data());
        for (t, &class) in sample.labels.iter().enumerate() {
            labels.set(&[bi, class, t], 1.0);
        }
    }
    let input = t!(Tensor::new(vec![n, c, l, h, w], data));
    Ok((input, labels))
}

fn tree_bytes(root: &Path, dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| format!("error: cannot read {}: {e}", dir.display()))?;
    for entry in entries {
        let path = entry.map_err(|e| format!("error: {e}"))?.path();
        if path.is_dir() {
            out.extend(tree_bytes(root, &path)?);
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            out.insert(
                rel,
                std::fs::read(&path).map_err(|e| format!("error: {e}"))?,
            );
        }
    }
    Ok(out)
}
