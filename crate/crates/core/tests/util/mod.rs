//! Shared helpers for the integration tests: random tensors and the central
//! finite-difference gradient check used by both the dedicated gradient test
//! and the acceptance gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpc_core::ops::{
    conv3d_backward, conv3d_forward, maxpool3d_backward, maxpool3d_forward,
    per_frame_softmax_loss, spatial_gap_backward, spatial_gap_forward,
    upsample_temporal_backward, upsample_temporal_forward, ConvParams, PoolParams,
};
use tpc_core::tensor::Tensor;

pub fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Symmetric relative error, safe near zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

const EPS: f64 = 1e-5;
const COORDS_PER_ARG: usize = 6;

/// Result of gradient-checking one family of primitives.
pub struct GradReport {
    pub name: &'static str,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

fn pick_coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..COORDS_PER_ARG.min(len)).map(|_| rng.gen_range(0..len)).collect()
}

/// Central-difference check of `analytic` against the scalar map `f` perturbed
/// at a sample of coordinates of `arg`. Returns the worst relative error.
fn check_arg(
    arg: &Tensor,
    analytic: &Tensor,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&Tensor) -> f64,
) -> (usize, f64) {
    let coords = pick_coords(arg.len(), rng);
    let mut worst = 0.0f64;
    for &i in &coords {
        let mut plus = arg.clone();
        plus.data_mut()[i] += EPS;
        let mut minus = arg.clone();
        minus.data_mut()[i] -= EPS;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    (coords.len(), worst)
}

/// <out, probe> turns any tensor-valued op into a scalar objective whose
/// input gradient is exactly the op's backward pass applied to the probe.
fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_report(cases: &[(Vec<usize>, [usize; 5], usize, (usize, usize, usize), (usize, usize, usize))], name: &'static str, seed0: u64) -> GradReport {
    let mut report = GradReport { name, instances: 0, coords_checked: 0, max_rel_err: 0.0 };
    for (i, (ishape, wshape, r, pad, stride)) in cases.iter().enumerate() {
        let seed = seed0 + 10 * i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng_tensor(ishape, seed + 1);
        let weights = rng_tensor(wshape, seed + 2);
        let bias = rng_tensor(&[wshape[0]], seed + 3);
        let params = ConvParams::new(weights.clone(), bias.clone(), *r, *pad, *stride).unwrap();
        let out = conv3d_forward(&input, &params).unwrap();
        let probe = rng_tensor(out.shape(), seed + 4);
        let (gi, gw, gb) = conv3d_backward(&input, &params, &probe).unwrap();

        let (c1, e1) = check_arg(&input, &gi, &mut rng, |x| {
            dot(&conv3d_forward(x, &params).unwrap(), &probe)
        });
        let (c2, e2) = check_arg(&weights, &gw, &mut rng, |w| {
            let p = ConvParams::new(w.clone(), bias.clone(), *r, *pad, *stride).unwrap();
            dot(&conv3d_forward(&input, &p).unwrap(), &probe)
        });
        let (c3, e3) = check_arg(&bias, &gb, &mut rng, |b| {
            let p = ConvParams::new(weights.clone(), b.clone(), *r, *pad, *stride).unwrap();
            dot(&conv3d_forward(&input, &p).unwrap(), &probe)
        });
        report.instances += 1;
        report.coords_checked += c1 + c2 + c3;
        report.max_rel_err = report.max_rel_err.max(e1).max(e2).max(e3);
    }
    report
}

/// Gradient-check every differentiable primitive: temporally dilated
/// convolution, dilated max pooling, spatial global average pooling, the
/// dense head convolutions, linear temporal upsampling, and the per-frame
/// cross-entropy loss. Returns one report per family.
pub fn gradcheck_all() -> Vec<GradReport> {
    let mut reports = Vec::new();

    // body convolutions: dilated, padded, strided variants
    let conv_cases: Vec<(Vec<usize>, [usize; 5], usize, (usize, usize, usize), (usize, usize, usize))> = vec![
        (vec![1, 2, 6, 5, 5], [3, 2, 3, 3, 3], 1, (1, 1, 1), (1, 1, 1)),
        (vec![2, 2, 8, 4, 4], [2, 2, 3, 3, 3], 2, (2, 1, 1), (1, 1, 1)),
        (vec![1, 3, 12, 4, 4], [2, 3, 3, 3, 3], 4, (4, 1, 1), (1, 1, 1)),
        (vec![1, 2, 17, 3, 3], [2, 2, 3, 3, 3], 8, (8, 1, 1), (1, 1, 1)),
        (vec![1, 2, 6, 6, 6], [2, 2, 2, 2, 2], 1, (0, 0, 0), (2, 2, 2)),
        (vec![2, 1, 9, 5, 5], [3, 1, 3, 3, 3], 2, (0, 2, 2), (1, 2, 2)),
        (vec![1, 2, 7, 4, 4], [2, 2, 1, 3, 3], 1, (0, 1, 1), (1, 1, 1)),
        (vec![1, 2, 10, 3, 3], [2, 2, 3, 1, 1], 4, (4, 0, 0), (2, 1, 1)),
    ];
    reports.push(conv_report(&conv_cases, "dilated conv", 1000));

    // head convolutions: spatial collapse then pointwise maps
    let head_cases: Vec<(Vec<usize>, [usize; 5], usize, (usize, usize, usize), (usize, usize, usize))> = vec![
        (vec![1, 3, 5, 4, 4], [4, 3, 1, 4, 4], 1, (0, 0, 0), (1, 1, 1)),
        (vec![2, 4, 6, 1, 1], [3, 4, 1, 1, 1], 1, (0, 0, 0), (1, 1, 1)),
        (vec![1, 5, 8, 1, 1], [5, 5, 1, 1, 1], 1, (0, 0, 0), (1, 1, 1)),
        (vec![1, 4, 7, 1, 1], [3, 4, 1, 1, 1], 1, (0, 0, 0), (1, 1, 1)),
    ];
    reports.push(conv_report(&head_cases, "head conv", 2000));

    // dilated max pooling; scores come from a continuous distribution, so the
    // probability of a tie within the step size is negligible
    let pool_cases: Vec<(Vec<usize>, (usize, usize, usize), (usize, usize, usize), (usize, usize, usize), usize)> = vec![
        (vec![1, 2, 6, 6, 6], (2, 2, 2), (2, 2, 2), (0, 0, 0), 1),
        (vec![1, 2, 8, 4, 4], (3, 3, 3), (1, 2, 2), (2, 1, 1), 2),
        (vec![2, 1, 12, 4, 4], (3, 3, 3), (1, 2, 2), (4, 1, 1), 4),
        (vec![1, 2, 18, 3, 3], (3, 3, 3), (1, 1, 1), (8, 1, 1), 8),
        (vec![1, 1, 5, 8, 8], (1, 2, 2), (1, 2, 2), (0, 0, 0), 1),
    ];
    let mut pool = GradReport { name: "max pool", instances: 0, coords_checked: 0, max_rel_err: 0.0 };
    for (i, (ishape, kernel, stride, pad, r)) in pool_cases.iter().enumerate() {
        let seed = 3000 + 10 * i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng_tensor(ishape, seed + 1);
        let params = PoolParams::new(*kernel, *stride, *pad, *r).unwrap();
        let (out, argmax) = maxpool3d_forward(&input, &params).unwrap();
        let probe = rng_tensor(out.shape(), seed + 2);
        let gi = maxpool3d_backward(ishape, &argmax, &probe).unwrap();
        let (c, e) = check_arg(&input, &gi, &mut rng, |x| {
            dot(&maxpool3d_forward(x, &params).unwrap().0, &probe)
        });
        pool.instances += 1;
        pool.coords_checked += c;
        pool.max_rel_err = pool.max_rel_err.max(e);
    }
    reports.push(pool);

    // spatial global average pooling
    let mut gap = GradReport { name: "spatial gap", instances: 0, coords_checked: 0, max_rel_err: 0.0 };
    for (i, ishape) in [vec![1, 2, 4, 3, 3], vec![2, 3, 5, 2, 4], vec![1, 4, 6, 1, 1]].iter().enumerate() {
        let seed = 4000 + 10 * i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng_tensor(ishape, seed + 1);
        let out = spatial_gap_forward(&input).unwrap();
        let probe = rng_tensor(out.shape(), seed + 2);
        let gi = spatial_gap_backward(ishape, &probe).unwrap();
        let (c, e) = check_arg(&input, &gi, &mut rng, |x| {
            dot(&spatial_gap_forward(x).unwrap(), &probe)
        });
        gap.instances += 1;
        gap.coords_checked += c;
        gap.max_rel_err = gap.max_rel_err.max(e);
    }
    reports.push(gap);

    // linear temporal upsampling
    let mut up = GradReport { name: "temporal upsample", instances: 0, coords_checked: 0, max_rel_err: 0.0 };
    for (i, (ishape, factor)) in [(vec![1, 3, 4], 4usize), (vec![2, 2, 5], 8)].iter().enumerate() {
        let seed = 5000 + 10 * i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng_tensor(ishape, seed + 1);
        let out = upsample_temporal_forward(&input, *factor).unwrap();
        let probe = rng_tensor(out.shape(), seed + 2);
        let gi = upsample_temporal_backward(ishape, *factor, &probe).unwrap();
        let (c, e) = check_arg(&input, &gi, &mut rng, |x| {
            dot(&upsample_temporal_forward(x, *factor).unwrap(), &probe)
        });
        up.instances += 1;
        up.coords_checked += c;
        up.max_rel_err = up.max_rel_err.max(e);
    }
    reports.push(up);

    // per-frame cross-entropy: the forward already returns its own gradient
    let mut loss = GradReport { name: "per-frame loss", instances: 0, coords_checked: 0, max_rel_err: 0.0 };
    for (i, (n, k1, l)) in [(1usize, 3usize, 4usize), (2, 5, 3), (1, 2, 6), (3, 4, 2)].iter().enumerate() {
        let seed = 6000 + 10 * i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rng_tensor(&[*n, *k1, *l], seed + 1);
        let mut labels = Tensor::zeros(&[*n, *k1, *l]);
        for ni in 0..*n {
            for t in 0..*l {
                let class = rng.gen_range(0..*k1);
                labels.set(&[ni, class, t], 1.0);
            }
        }
        let (_, grad) = per_frame_softmax_loss(&logits, &labels).unwrap();
        let (c, e) = check_arg(&logits, &grad, &mut rng, |x| {
            per_frame_softmax_loss(x, &labels).unwrap().0
        });
        loss.instances += 1;
        loss.coords_checked += c;
        loss.max_rel_err = loss.max_rel_err.max(e);
    }
    reports.push(loss);

    reports
}
