//! Central finite-difference verification of the analytic gradients.
//!
//! Each check contracts a forward pass with a fixed random upstream
//! gradient to get a scalar objective, perturbs one parameter at a time
//! by `+/-h`, and compares the centered difference against the analytic
//! backward pass. Results are worst relative errors per parameter group.
//!
//! Covariance entries are perturbed symmetrically (both off-diagonal
//! slots together), matching the matrix-convention gradient where the
//! derivative with respect to the shared value is `g01 + g10`.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraExtrinsics, FisheyeIntrinsics};
use crate::lift::DepthBinSpec;
use crate::lut::build_lut;
use crate::splat::{splat_backward, splat_forward, BevGridSpec, Gaussian2, SplatError};
use crate::synth::NUM_CLASSES;
use crate::train::{
    evaluate_scene, softmax_probs, weighted_ce, BevLabels, CameraParams, ClassWeights,
    SceneBundle, ToyTrainConfig, TrainError,
};

/// Default central-difference step for the gradient checks.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Truncation radius for gradient checks: wide enough that boundary
/// cells carry ~exp(-32) of the density, so support changes under the
/// finite-difference step are far below the comparison tolerances.
pub const GRADCHECK_TRUNC_SIGMA: f64 = 8.0;

/// Worst relative errors of the splat backward pass per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGradReport {
    pub weight: f64,
    pub mean: f64,
    pub cov: f64,
    pub feature: f64,
}

impl SplatGradReport {
    pub fn max(&self) -> f64 {
        self.weight.max(self.mean).max(self.cov).max(self.feature)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng, channels: usize) -> Gaussian2 {
    let l1 = rng.gen_range(0.05..2.0);
    let l2 = rng.gen_range(0.05..2.0);
    let ang = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = ang.sin_cos();
    let a = c * c * l1 + s * s * l2;
    let b = s * c * (l1 - l2);
    let d = s * s * l1 + c * c * l2;
    Gaussian2 {
        mean: Vector2::new(rng.gen_range(-10.0..10.0), rng.gen_range(-7.0..7.0)),
        cov: Matrix2::new(a, b, b, d),
        weight: rng.gen_range(0.1..2.0),
        feature: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Checks the splat backward against central finite differences over
/// `count` random Gaussians. `perturb` scales one analytic gradient
/// component by `1 + perturb` first (a negative-control hook).
pub fn splat_gradcheck(
    seed: u64,
    count: usize,
    step: f64,
    perturb: f64,
) -> Result<SplatGradReport, SplatError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 3usize;
    let spec = BevGridSpec::default_grid(channels);
    let cells = spec.rows() * spec.cols();
    let gaussians: Vec<Gaussian2> = (0..count).map(|_| random_gaussian(&mut rng, channels)).collect();
    let grad_features: Vec<f64> = (0..cells * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad_mass: Vec<f64> = (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |gaussians: &[Gaussian2]| -> Result<f64, SplatError> {
        let raster = splat_forward(gaussians, &spec, GRADCHECK_TRUNC_SIGMA, false)?;
        let mut sum = 0.0;
        for (f, g) in raster.features().iter().zip(&grad_features) {
            sum += f * g;
        }
        for (m, g) in raster.mass().iter().zip(&grad_mass) {
            sum += m * g;
        }
        Ok(sum)
    };

    let mut grads = splat_backward(
        &grad_features,
        &grad_mass,
        &gaussians,
        &spec,
        GRADCHECK_TRUNC_SIGMA,
    )?;
    if perturb != 0.0 && !grads.is_empty() {
        grads[0].weight *= 1.0 + perturb;
        grads[0].mean.x *= 1.0 + perturb;
        grads[0].cov[(0, 0)] *= 1.0 + perturb;
        if !grads[0].feature.is_empty() {
            grads[0].feature[0] *= 1.0 + perturb;
        }
    }

    let mut report = SplatGradReport {
        weight: 0.0,
        mean: 0.0,
        cov: 0.0,
        feature: 0.0,
    };
    let mut work = gaussians.clone();
    let fd = |work: &mut Vec<Gaussian2>, gi: usize, set: &dyn Fn(&mut Gaussian2, f64)| -> Result<f64, SplatError> {
        set(&mut work[gi], step);
        let hi = objective(work)?;
        set(&mut work[gi], -2.0 * step);
        let lo = objective(work)?;
        set(&mut work[gi], step);
        Ok((hi - lo) / (2.0 * step))
    };

    for (gi, grad) in grads.iter().enumerate() {
        let numeric = fd(&mut work, gi, &|gauss, h| gauss.weight += h)?;
        report.weight = report.weight.max(rel_err(grad.weight, numeric));

        let numeric = fd(&mut work, gi, &|gauss, h| gauss.mean.x += h)?;
        report.mean = report.mean.max(rel_err(grad.mean.x, numeric));
        let numeric = fd(&mut work, gi, &|gauss, h| gauss.mean.y += h)?;
        report.mean = report.mean.max(rel_err(grad.mean.y, numeric));

        let numeric = fd(&mut work, gi, &|gauss, h| gauss.cov[(0, 0)] += h)?;
        report.cov = report.cov.max(rel_err(grad.cov[(0, 0)], numeric));
        let numeric = fd(&mut work, gi, &|gauss, h| gauss.cov[(1, 1)] += h)?;
        report.cov = report.cov.max(rel_err(grad.cov[(1, 1)], numeric));
        let numeric = fd(&mut work, gi, &|gauss, h| {
            gauss.cov[(0, 1)] += h;
            gauss.cov[(1, 0)] += h;
        })?;
        report.cov = report
            .cov
            .max(rel_err(grad.cov[(0, 1)] + grad.cov[(1, 0)], numeric));

        for k in 0..channels {
            let numeric = fd(&mut work, gi, &|gauss, h| gauss.feature[k] += h)?;
            report.feature = report.feature.max(rel_err(grad.feature[k], numeric));
        }
    }
    Ok(report)
}

/// Checks the weighted cross-entropy gradient on a small random instance.
pub fn ce_gradcheck(seed: u64, perturb: f64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols, classes) = (4usize, 4usize, 3usize);
    let ids: Vec<u8> = (0..rows * cols).map(|_| rng.gen_range(0..classes) as u8).collect();
    let mut ignored = vec![false; rows * cols];
    ignored[rng.gen_range(0..rows * cols)] = true;
    let labels = BevLabels::from_class_ids(rows, cols, classes, ids, Some(ignored))?;
    let weights = ClassWeights::new(vec![0.7, 1.3, 2.9])?;
    let mut logits: Vec<f64> = (0..rows * cols * classes).map(|_| rng.gen_range(-1.5..1.5)).collect();

    let (_, mut grad) = weighted_ce(&softmax_probs(&logits, classes), &labels, &weights)?;
    if perturb != 0.0 {
        grad[0] *= 1.0 + perturb;
    }
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for idx in 0..logits.len() {
        let orig = logits[idx];
        logits[idx] = orig + h;
        let hi = weighted_ce(&softmax_probs(&logits, classes), &labels, &weights)?.0;
        logits[idx] = orig - h;
        let lo = weighted_ce(&softmax_probs(&logits, classes), &labels, &weights)?.0;
        logits[idx] = orig;
        worst = worst.max(rel_err(grad[idx], (hi - lo) / (2.0 * h)));
    }
    Ok(worst)
}

/// Checks the full chain (depth/feature logits -> lift -> splat ->
/// normalize -> softmax CE) against finite differences on a 16x16-pixel
/// single-camera instance. Probes `probes` random depth logits and a few
/// feature logits; returns the worst relative error.
pub fn end_to_end_gradcheck(seed: u64, probes: usize, perturb: f64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = FisheyeIntrinsics::new(
        4.5,
        [8.0, 8.0],
        vec![0.05, -0.01, 0.0, 0.0],
        (16, 16),
        95.0_f64.to_radians(),
    )
    .expect("probe intrinsics are valid");
    let lut = build_lut(&intr, 1).expect("probe LUT builds");
    let ext = CameraExtrinsics::new(
        crate::synth::rig_rotation(0.35, 25.0_f64.to_radians()),
        nalgebra::Vector3::new(0.4, -0.2, 1.1),
    )
    .expect("rig rotations are orthonormal");
    let grid = BevGridSpec::default_grid(NUM_CLASSES);
    let bins = DepthBinSpec::default_64();

    let ids: Vec<u8> = (0..grid.rows() * grid.cols())
        .map(|_| rng.gen_range(0..NUM_CLASSES) as u8)
        .collect();
    let labels = BevLabels::from_class_ids(grid.rows(), grid.cols(), NUM_CLASSES, ids, None)?;
    let bundle = SceneBundle {
        name: "gradcheck".to_string(),
        extrinsics: vec![ext],
        luts: vec![lut.clone()],
        labels,
    };
    let cfg = ToyTrainConfig {
        // No pruning: every (pixel, bin) stays in the chain, so the map
        // is smooth at the probe points.
        prune_below: 0.0,
        ..ToyTrainConfig::with_defaults(grid, 1)
    };
    let weights = ClassWeights::new(vec![1.0, 0.6, 2.2])?;

    let mut params = vec![CameraParams::cold_start(&lut, bins.count(), NUM_CLASSES, cfg.sigma)];
    for v in params[0].depth_logits.data_mut().iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in params[0].feature_logits.data_mut().iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }

    let eval = evaluate_scene(&params, &bundle, &cfg, &weights, true)?;
    let mut depth_grads = eval.depth_grads.expect("gradients requested")[0].clone();
    let feature_grads = eval.feature_grads.expect("gradients requested")[0].clone();
    if perturb != 0.0 {
        depth_grads.data_mut()[0] *= 1.0 + perturb;
    }

    let h = DEFAULT_FD_STEP;
    let mut worst = 0.0_f64;
    let depth_len = params[0].depth_logits.data().len();
    let scalar_loss = |params: &[CameraParams]| -> Result<f64, TrainError> {
        Ok(evaluate_scene(params, &bundle, &cfg, &weights, false)?.loss)
    };
    for _ in 0..probes {
        let idx = rng.gen_range(0..depth_len);
        let orig = params[0].depth_logits.data()[idx];
        params[0].depth_logits.data_mut()[idx] = orig + h;
        let hi = scalar_loss(&params)?;
        params[0].depth_logits.data_mut()[idx] = orig - h;
        let lo = scalar_loss(&params)?;
        params[0].depth_logits.data_mut()[idx] = orig;
        worst = worst.max(rel_err(depth_grads.data()[idx], (hi - lo) / (2.0 * h)));
    }
    let feature_len = params[0].feature_logits.data().len();
    for _ in 0..probes.min(16) {
        let idx = rng.gen_range(0..feature_len);
        let orig = params[0].feature_logits.data()[idx];
        params[0].feature_logits.data_mut()[idx] = orig + h;
        let hi = scalar_loss(&params)?;
        params[0].feature_logits.data_mut()[idx] = orig - h;
        let lo = scalar_loss(&params)?;
        params[0].feature_logits.data_mut()[idx] = orig;
        worst = worst.max(rel_err(feature_grads.data()[idx], (hi - lo) / (2.0 * h)));
    }
    Ok(worst)
}
