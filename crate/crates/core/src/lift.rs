//! Lifting (pixel, depth bin) pairs into 3D Gaussian primitives.
//!
//! Each valid LUT ray and depth bin center `z_d` produce a candidate
//! Gaussian: mean `R * (u * z_d) + t`, covariance
//! `sigma_eff^2 * I + delta delta^T` where `delta = (bin_width / 2) * R * u`
//! elongates the uncertainty along the viewing ray by the bin half-width,
//! and weight equal to the pixel's categorical depth probability for that
//! bin. Gaussians below a weight threshold are pruned to bound the
//! primitive count.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::CameraExtrinsics;
use crate::field::PixelField;
use crate::lut::RayLut;

/// Positive-definiteness floor applied to the depth uncertainty, meters.
pub const DEFAULT_EPS_FLOOR: f64 = 1e-4;

/// Default weight threshold below which lifted Gaussians are dropped.
pub const DEFAULT_PRUNE_BELOW: f64 = 1e-4;

/// Default depth uncertainty when no sigma field is supplied, meters.
pub const DEFAULT_SIGMA: f64 = 0.15;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("invalid depth bin spec: {0}")]
    InvalidBinSpec(String),
    #[error("invalid depth distribution: {0}")]
    InvalidDistribution(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Uniform depth binning over a metric range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinSpec {
    count: usize,
    z_min: f64,
    z_max: f64,
}

impl DepthBinSpec {
    pub fn new(count: usize, z_min: f64, z_max: f64) -> Result<Self, LiftError> {
        if count < 1 {
            return Err(LiftError::InvalidBinSpec("count must be >= 1".to_string()));
        }
        let ordered = z_min.is_finite() && z_max.is_finite() && z_min > 0.0 && z_max > z_min;
        if !ordered {
            return Err(LiftError::InvalidBinSpec(format!(
                "need 0 < z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        Ok(Self { count, z_min, z_max })
    }

    /// 64 uniform bins spanning 1 m to 30 m.
    pub fn default_64() -> Self {
        Self {
            count: 64,
            z_min: 1.0,
            z_max: 30.0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn bin_width(&self) -> f64 {
        (self.z_max - self.z_min) / self.count as f64
    }

    /// Center of bin `d`: `z_min + (d + 0.5) * bin_width`.
    pub fn bin_center(&self, d: usize) -> f64 {
        debug_assert!(d < self.count);
        self.z_min + (d as f64 + 0.5) * self.bin_width()
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.count).map(|d| self.bin_center(d)).collect()
    }

    /// Bin index containing a metric range, clamped to the bin range.
    pub fn bin_for_range(&self, range: f64) -> usize {
        if range.is_nan() || range <= self.z_min {
            return 0;
        }
        let idx = ((range - self.z_min) / self.bin_width()).floor();
        (idx as usize).min(self.count - 1)
    }
}

/// Per-pixel categorical distributions over depth bins.
///
/// Stored as a `PixelField` with `count` channels. Every pixel row must
/// sum to 1 (within 1e-6) or be identically zero; all-zero rows mark
/// pixels excluded from lifting (for example sky pixels in oracle
/// inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    field: PixelField,
}

impl DepthDistribution {
    pub fn new(field: PixelField) -> Result<Self, LiftError> {
        for row in 0..field.height() {
            for col in 0..field.width() {
                let probs = field.pixel(row, col);
                let mut sum = 0.0;
                for &p in probs {
                    if p.is_nan() || p < 0.0 {
                        return Err(LiftError::InvalidDistribution(format!(
                            "negative or NaN probability at pixel ({row}, {col})"
                        )));
                    }
                    sum += p;
                }
                if sum != 0.0 && (sum - 1.0).abs() > 1e-6 {
                    return Err(LiftError::InvalidDistribution(format!(
                        "pixel ({row}, {col}) sums to {sum}, expected 1 or 0"
                    )));
                }
            }
        }
        Ok(Self { field })
    }

    /// Uniform distribution `1 / count` everywhere.
    pub fn uniform(width: usize, height: usize, count: usize) -> Self {
        let p = 1.0 / count as f64;
        Self {
            field: PixelField::from_data(width, height, count, vec![p; width * height * count]),
        }
    }

    /// Softmax over per-pixel logits, shift-invariant and summing to 1.
    pub fn from_logits(logits: &PixelField) -> Self {
        let mut field = logits.clone();
        let channels = field.channels();
        for px in field.data_mut().chunks_exact_mut(channels) {
            softmax_in_place(px);
        }
        Self { field }
    }

    pub fn field(&self) -> &PixelField {
        &self.field
    }

    pub fn width(&self) -> usize {
        self.field.width()
    }

    pub fn height(&self) -> usize {
        self.field.height()
    }

    pub fn bin_count(&self) -> usize {
        self.field.channels()
    }
}

/// Numerically stable in-place softmax with max shift.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// One lifted primitive: a weighted anisotropic Gaussian with a feature payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3 {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub weight: f64,
    pub feature: Vec<f64>,
}

/// World-frame mean of a lifted pixel: `R * (dir * range) + t`.
///
/// `dir` must be unit (within 1e-6) and `range` positive.
pub fn lift_mean(
    dir: &Vector3<f64>,
    range: f64,
    ext: &CameraExtrinsics,
) -> Result<Vector3<f64>, LiftError> {
    if (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(LiftError::Domain(format!(
            "direction must be unit length, got norm {}",
            dir.norm()
        )));
    }
    let positive = range.is_finite() && range > 0.0;
    if !positive {
        return Err(LiftError::Domain(format!("range must be positive, got {range}")));
    }
    Ok(ext.rotation() * (dir * range) + ext.translation())
}

/// Composes the lifted covariance `max(sigma, eps_floor)^2 * I + delta * delta^T`.
///
/// The isotropic term carries the depth uncertainty (floored to keep the
/// matrix positive definite when sigma is zero); the rank-1 term carries
/// the discretization-induced variance along `delta`.
pub fn compose_covariance(
    sigma: f64,
    delta: &Vector3<f64>,
    eps_floor: f64,
) -> Result<Matrix3<f64>, LiftError> {
    if !sigma.is_finite() || !delta.iter().all(|x| x.is_finite()) || !eps_floor.is_finite() {
        return Err(LiftError::Domain("covariance inputs must be finite".to_string()));
    }
    if sigma < 0.0 {
        return Err(LiftError::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    if eps_floor <= 0.0 {
        return Err(LiftError::Domain(format!("eps_floor must be > 0, got {eps_floor}")));
    }
    let s = sigma.max(eps_floor);
    Ok(Matrix3::identity() * (s * s) + delta * delta.transpose())
}

/// Per-camera lifting configuration.
#[derive(Debug, Clone, Copy)]
pub struct LiftConfig {
    pub eps_floor: f64,
    pub prune_below: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            eps_floor: DEFAULT_EPS_FLOOR,
            prune_below: DEFAULT_PRUNE_BELOW,
        }
    }
}

/// Source of one lifted Gaussian: LUT entry and depth bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftTrace {
    pub row: u32,
    pub col: u32,
    pub bin: u32,
}

/// Lifts every (valid pixel, depth bin) pair of one camera into Gaussians.
///
/// `sigma_map` must be a 1-channel field and `features` a C-channel field,
/// both with the LUT's dimensions. Emission order is row-major pixels,
/// then bins, so the output is deterministic. Gaussians with weight below
/// `cfg.prune_below` are dropped.
pub fn lift_camera(
    lut: &RayLut,
    ext: &CameraExtrinsics,
    spec: &DepthBinSpec,
    depth: &DepthDistribution,
    sigma_map: &PixelField,
    features: &PixelField,
    cfg: &LiftConfig,
) -> Result<Vec<Gaussian3>, LiftError> {
    Ok(lift_camera_traced(lut, ext, spec, depth, sigma_map, features, cfg)?.0)
}

/// [`lift_camera`] plus the (pixel, bin) source of each emitted Gaussian,
/// which gradient consumers use to route per-Gaussian gradients back to
/// per-pixel parameters.
pub fn lift_camera_traced(
    lut: &RayLut,
    ext: &CameraExtrinsics,
    spec: &DepthBinSpec,
    depth: &DepthDistribution,
    sigma_map: &PixelField,
    features: &PixelField,
    cfg: &LiftConfig,
) -> Result<(Vec<Gaussian3>, Vec<LiftTrace>), LiftError> {
    check_lift_shapes(lut, spec, depth, sigma_map, features)?;

    let centers = spec.bin_centers();
    let half_width = 0.5 * spec.bin_width();
    let rotation = *ext.rotation();
    let translation = *ext.translation();
    let width = lut.width();

    // Row-parallel map preserves emission order after flattening.
    let per_row: Vec<(Vec<Gaussian3>, Vec<LiftTrace>)> = (0..lut.height())
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            let mut traces = Vec::new();
            for j in 0..width {
                let Some(d) = lut.direction(i, j) else { continue };
                let dir = Vector3::new(f64::from(d[0]), f64::from(d[1]), f64::from(d[2]));
                let ray_world = rotation * dir;
                let delta = ray_world * half_width;
                let spread = delta * delta.transpose();
                let sigma = sigma_map.get(i, j, 0);
                let s = sigma.max(cfg.eps_floor);
                let cov = Matrix3::identity() * (s * s) + spread;
                let probs = depth.field().pixel(i, j);
                let feature = features.pixel(i, j);
                for (bin, &p) in probs.iter().enumerate() {
                    if p < cfg.prune_below {
                        continue;
                    }
                    out.push(Gaussian3 {
                        mean: ray_world * centers[bin] + translation,
                        cov,
                        weight: p,
                        feature: feature.to_vec(),
                    });
                    traces.push(LiftTrace {
                        row: i as u32,
                        col: j as u32,
                        bin: bin as u32,
                    });
                }
            }
            (out, traces)
        })
        .collect();

    let mut gaussians = Vec::new();
    let mut traces = Vec::new();
    for (g, t) in per_row {
        gaussians.extend(g);
        traces.extend(t);
    }
    Ok((gaussians, traces))
}

fn check_lift_shapes(
    lut: &RayLut,
    spec: &DepthBinSpec,
    depth: &DepthDistribution,
    sigma_map: &PixelField,
    features: &PixelField,
) -> Result<(), LiftError> {
    let (w, h) = (lut.width(), lut.height());
    if depth.width() != w || depth.height() != h {
        return Err(LiftError::DimensionMismatch(format!(
            "depth field is {}x{}, LUT is {w}x{h}",
            depth.width(),
            depth.height()
        )));
    }
    if depth.bin_count() != spec.count() {
        return Err(LiftError::DimensionMismatch(format!(
            "depth field has {} bins, spec has {}",
            depth.bin_count(),
            spec.count()
        )));
    }
    if sigma_map.width() != w || sigma_map.height() != h || sigma_map.channels() != 1 {
        return Err(LiftError::DimensionMismatch(
            "sigma map must be a 1-channel field with LUT dimensions".to_string(),
        ));
    }
    if features.width() != w || features.height() != h {
        return Err(LiftError::DimensionMismatch(
            "feature field must match LUT dimensions".to_string(),
        ));
    }
    Ok(())
}
