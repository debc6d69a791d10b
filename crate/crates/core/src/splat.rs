//! Differentiable anisotropic rasterization of ground-plane Gaussians.
//!
//! A lifted 3D Gaussian is marginalized to the ground plane (the exact
//! marginal of a multivariate normal is the corresponding 2x2 covariance
//! block) and accumulated onto a metric BEV grid: each cell center within
//! a Mahalanobis truncation radius receives
//! `weight * N(center; mean, cov) * cell_area`, summed over Gaussians.
//! Accumulation is un-normalized and linear, which keeps the analytic
//! backward pass exact; per-cell mass normalization is a separate
//! composable step with its own chain rule.
//!
//! Rasterization is tiled: the grid is split into 16x16-cell tiles,
//! Gaussians are binned to every tile their truncation box overlaps, and
//! each tile accumulates its own cells in Gaussian-index order before an
//! ordered write-back. Tiles own disjoint cells, so the output is
//! bit-identical for any number of worker threads.
//!
//! BEVR layout (little-endian): magic `BEVR`, version u32 = 1, rows u32,
//! cols u32, channels u32, x_lo/x_hi/y_lo/y_hi/resolution float64, then
//! `rows * cols * channels` float32 features row-major channel-last, then
//! `rows * cols` float32 mass.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

pub use crate::binio::FormatError;
use crate::binio::{self, OffsetReader};
use crate::lift::Gaussian3;

/// Tile edge length in cells.
const TILE: usize = 16;

/// Default Mahalanobis truncation radius.
pub const DEFAULT_TRUNC_SIGMA: f64 = 3.0;

/// Mass floor used when normalizing features by accumulated mass.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
}

/// Metric BEV grid geometry: extents, resolution, and channel count.
///
/// Columns follow x (longitudinal, forward positive), rows follow y
/// (lateral, left positive). Cell `(i, j)` has center
/// `(x_lo + (j + 0.5) * res, y_lo + (i + 0.5) * res)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGridSpec {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    resolution: f64,
    channels: usize,
}

impl BevGridSpec {
    pub fn new(
        x_range: [f64; 2],
        y_range: [f64; 2],
        resolution: f64,
        channels: usize,
    ) -> Result<Self, SplatError> {
        let [x_lo, x_hi] = x_range;
        let [y_lo, y_hi] = y_range;
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(SplatError::InvalidGrid(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        let extents_ok = [x_lo, x_hi, y_lo, y_hi].iter().all(|v| v.is_finite())
            && x_hi > x_lo
            && y_hi > y_lo;
        if !extents_ok {
            return Err(SplatError::InvalidGrid("empty or non-finite extents".to_string()));
        }
        for (name, span) in [("x", x_hi - x_lo), ("y", y_hi - y_lo)] {
            let cells = span / resolution;
            if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) {
                return Err(SplatError::InvalidGrid(format!(
                    "{name} span {span} is not an integer multiple of resolution {resolution}"
                )));
            }
        }
        // Class ids travel as u8 throughout the label pipeline.
        if !(1..=255).contains(&channels) {
            return Err(SplatError::InvalidGrid(format!(
                "channel count must be in 1..=255, got {channels}"
            )));
        }
        Ok(Self {
            x_lo,
            x_hi,
            y_lo,
            y_hi,
            resolution,
            channels,
        })
    }

    /// The stock grid: 24 m x 18 m around the ego at 0.375 m, 64x48 cells.
    pub fn default_grid(channels: usize) -> Self {
        Self::new([-12.0, 12.0], [-9.0, 9.0], 0.375, channels).expect("default grid is valid")
    }

    pub fn cols(&self) -> usize {
        ((self.x_hi - self.x_lo) / self.resolution).round() as usize
    }

    pub fn rows(&self) -> usize {
        ((self.y_hi - self.y_lo) / self.resolution).round() as usize
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn x_range(&self) -> [f64; 2] {
        [self.x_lo, self.x_hi]
    }

    pub fn y_range(&self) -> [f64; 2] {
        [self.y_lo, self.y_hi]
    }

    pub fn cell_area(&self) -> f64 {
        self.resolution * self.resolution
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(
            self.x_lo + (col as f64 + 0.5) * self.resolution,
            self.y_lo + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// With a different channel count, same geometry.
    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

/// Fractional (column, row) cell coordinate of a world point.
///
/// The inverse of the cell-center formula: the first cell center maps to
/// `(0, 0)`. Out-of-range points are returned as-is; callers clamp.
pub fn world_to_cell(p: &Vector2<f64>, spec: &BevGridSpec) -> (f64, f64) {
    (
        (p.x - spec.x_lo) / spec.resolution - 0.5,
        (p.y - spec.y_lo) / spec.resolution - 0.5,
    )
}

/// Accumulated BEV raster: features plus scalar mass per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BevRaster {
    spec: BevGridSpec,
    /// rows * cols * channels, row-major channel-last.
    features: Vec<f64>,
    /// rows * cols accumulated weight-density.
    mass: Vec<f64>,
}

impl BevRaster {
    pub fn zeros(spec: BevGridSpec) -> Self {
        let cells = spec.rows() * spec.cols();
        Self {
            spec,
            features: vec![0.0; cells * spec.channels()],
            mass: vec![0.0; cells],
        }
    }

    pub fn spec(&self) -> &BevGridSpec {
        &self.spec
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn feature_at(&self, row: usize, col: usize) -> &[f64] {
        let c = self.spec.channels();
        let base = (row * self.spec.cols() + col) * c;
        &self.features[base..base + c]
    }

    pub fn mass_at(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.spec.cols() + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Divides every cell's features by `max(mass, NORMALIZE_EPS)`.
    pub fn normalize_features(&mut self) {
        let c = self.spec.channels();
        for (cell, feats) in self.features.chunks_exact_mut(c).enumerate() {
            let denom = self.mass[cell].max(NORMALIZE_EPS);
            for f in feats {
                *f /= denom;
            }
        }
    }

    /// Per-cell argmax over channels; ties break toward the lowest index.
    pub fn argmax_classes(&self) -> Vec<u8> {
        let c = self.spec.channels();
        self.features
            .chunks_exact(c)
            .map(|feats| {
                let mut best = 0usize;
                for (k, &v) in feats.iter().enumerate() {
                    if v > feats[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"BEVR");
        binio::write_u32(&mut out, 1).unwrap();
        binio::write_u32(&mut out, self.spec.rows() as u32).unwrap();
        binio::write_u32(&mut out, self.spec.cols() as u32).unwrap();
        binio::write_u32(&mut out, self.spec.channels() as u32).unwrap();
        for v in [
            self.spec.x_lo,
            self.spec.x_hi,
            self.spec.y_lo,
            self.spec.y_hi,
            self.spec.resolution,
        ] {
            binio::write_f64(&mut out, v).unwrap();
        }
        let feats: Vec<f32> = self.features.iter().map(|&v| v as f32).collect();
        binio::write_f32_slice(&mut out, &feats).unwrap();
        let mass: Vec<f32> = self.mass.iter().map(|&v| v as f32).collect();
        binio::write_f32_slice(&mut out, &mass).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SplatError> {
        let mut r = OffsetReader::new(bytes);
        r.magic(*b"BEVR")?;
        r.version(1)?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let channels = r.u32("channels")? as usize;
        let x_lo = r.f64("x_lo")?;
        let x_hi = r.f64("x_hi")?;
        let y_lo = r.f64("y_lo")?;
        let y_hi = r.f64("y_hi")?;
        let resolution = r.f64("resolution")?;
        let spec = BevGridSpec::new([x_lo, x_hi], [y_lo, y_hi], resolution, channels)?;
        if spec.rows() != rows || spec.cols() != cols {
            return Err(SplatError::InvalidGrid(format!(
                "header says {rows}x{cols} cells but extents give {}x{}",
                spec.rows(),
                spec.cols()
            )));
        }
        let features = r.f32_vec(rows * cols * channels, "feature payload")?;
        let mass = r.f32_vec(rows * cols, "mass payload")?;
        r.expect_eof()?;
        Ok(Self {
            spec,
            features: features.into_iter().map(f64::from).collect(),
            mass: mass.into_iter().map(f64::from).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SplatError> {
        let mut f = std::fs::File::create(path).map_err(FormatError::from)?;
        f.write_all(&self.to_bytes()).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SplatError> {
        Self::from_bytes(&std::fs::read(path).map_err(FormatError::from)?)
    }
}

/// A ground-plane Gaussian with weight and feature payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub weight: f64,
    pub feature: Vec<f64>,
}

/// Projects a 3D Gaussian to the ground plane.
///
/// The marginal over the vertical axis keeps the (x, y) mean and the
/// ground-plane 2x2 block of the covariance; weight and feature carry
/// through. A principal submatrix of an SPD matrix is SPD, so no checks
/// are needed.
pub fn marginalize_to_ground(g: &Gaussian3) -> Gaussian2 {
    Gaussian2 {
        mean: Vector2::new(g.mean.x, g.mean.y),
        cov: Matrix2::new(g.cov[(0, 0)], g.cov[(0, 1)], g.cov[(1, 0)], g.cov[(1, 1)]),
        weight: g.weight,
        feature: g.feature.clone(),
    }
}

/// Per-Gaussian gradients produced by [`splat_backward`].
///
/// `cov` uses the matrix convention (`d loss / d cov[i][j]` with entries
/// treated independently); the derivative with respect to the shared
/// off-diagonal value of a symmetric covariance is `cov[(0,1)] + cov[(1,0)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub weight: f64,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub feature: Vec<f64>,
}

impl GaussianGrad {
    fn zeros(channels: usize) -> Self {
        Self {
            weight: 0.0,
            mean: Vector2::zeros(),
            cov: Matrix2::zeros(),
            feature: vec![0.0; channels],
        }
    }
}

/// Precomputed per-Gaussian rasterization state.
struct Prepared {
    mean: Vector2<f64>,
    inv_a: f64,
    inv_b: f64,
    inv_d: f64,
    /// `weight * norm_const * cell_area`.
    amp: f64,
    /// `norm_const * cell_area` (without the weight factor).
    density_amp: f64,
    /// Inclusive cell bounds of the truncation box, or None when the
    /// Gaussian reaches no cell.
    bounds: Option<(usize, usize, usize, usize)>,
}

fn prepare(
    g: &Gaussian2,
    spec: &BevGridSpec,
    trunc_sigma: f64,
    index: usize,
) -> Result<Prepared, SplatError> {
    let a = g.cov[(0, 0)];
    let b = g.cov[(0, 1)];
    let b2 = g.cov[(1, 0)];
    let d = g.cov[(1, 1)];
    let finite = a.is_finite()
        && b.is_finite()
        && d.is_finite()
        && g.weight.is_finite()
        && g.mean.x.is_finite()
        && g.mean.y.is_finite()
        && g.feature.iter().all(|f| f.is_finite());
    if !finite {
        return Err(SplatError::Domain(format!("gaussian {index} has non-finite parameters")));
    }
    if (b - b2).abs() > 1e-9 * (a.abs() + d.abs()).max(1.0) {
        return Err(SplatError::Domain(format!("gaussian {index} covariance is not symmetric")));
    }
    let det = a * d - b * b;
    let spd = det > 0.0 && a > 0.0;
    if !spd {
        return Err(SplatError::Domain(format!(
            "gaussian {index} covariance is not positive definite (det {det}, a {a})"
        )));
    }
    if g.feature.len() != spec.channels() {
        return Err(SplatError::DimensionMismatch(format!(
            "gaussian {index} has {} feature channels, grid has {}",
            g.feature.len(),
            spec.channels()
        )));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
    let area = spec.cell_area();
    Ok(Prepared {
        mean: g.mean,
        inv_a: d / det,
        inv_b: -b / det,
        inv_d: a / det,
        amp: g.weight * norm * area,
        density_amp: norm * area,
        bounds: truncation_bounds(&g.mean, a, d, spec, trunc_sigma),
    })
}

/// Cells whose centers can lie inside the truncation ellipse. The box is
/// conservative; the exact Mahalanobis test runs per cell.
fn truncation_bounds(
    mean: &Vector2<f64>,
    var_x: f64,
    var_y: f64,
    spec: &BevGridSpec,
    trunc_sigma: f64,
) -> Option<(usize, usize, usize, usize)> {
    let rows = spec.rows();
    let cols = spec.cols();
    if !trunc_sigma.is_finite() {
        return Some((0, rows - 1, 0, cols - 1));
    }
    let half_x = trunc_sigma * var_x.sqrt();
    let half_y = trunc_sigma * var_y.sqrt();
    let (col_lo, _) = world_to_cell(&Vector2::new(mean.x - half_x, 0.0), spec);
    let (col_hi, _) = world_to_cell(&Vector2::new(mean.x + half_x, 0.0), spec);
    let (_, row_lo) = world_to_cell(&Vector2::new(0.0, mean.y - half_y), spec);
    let (_, row_hi) = world_to_cell(&Vector2::new(0.0, mean.y + half_y), spec);
    let j0 = col_lo.ceil().max(0.0);
    let j1 = col_hi.floor().min(cols as f64 - 1.0);
    let i0 = row_lo.ceil().max(0.0);
    let i1 = row_hi.floor().min(rows as f64 - 1.0);
    if j0 > j1 || i0 > i1 {
        return None;
    }
    Some((i0 as usize, i1 as usize, j0 as usize, j1 as usize))
}

/// Rasterizes Gaussians onto the grid.
///
/// Each cell center within Mahalanobis distance `trunc_sigma` of a
/// Gaussian accumulates `weight * N(center) * cell_area` into the mass
/// plane and that amount times the feature vector into the feature
/// planes. With `normalize`, features are divided by `max(mass, 1e-12)`
/// per cell after accumulation (the un-normalized raster is the
/// differentiable primitive; see [`splat_backward`]).
pub fn splat_forward(
    gaussians: &[Gaussian2],
    spec: &BevGridSpec,
    trunc_sigma: f64,
    normalize: bool,
) -> Result<BevRaster, SplatError> {
    let trunc_ok = trunc_sigma > 0.0;
    if !trunc_ok {
        return Err(SplatError::Domain(format!(
            "trunc_sigma must be positive, got {trunc_sigma}"
        )));
    }
    let prepared: Vec<Prepared> = gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| prepare(g, spec, trunc_sigma, i))
        .collect::<Result<_, _>>()?;

    let rows = spec.rows();
    let cols = spec.cols();
    let channels = spec.channels();
    let tiles_x = cols.div_ceil(TILE);
    let tiles_y = rows.div_ceil(TILE);
    let trunc_sq = trunc_sigma * trunc_sigma;

    // Bin Gaussians to overlapping tiles; pushes in index order keep each
    // tile's list ascending, which fixes the accumulation order.
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (gi, p) in prepared.iter().enumerate() {
        let Some((i0, i1, j0, j1)) = p.bounds else { continue };
        for ty in i0 / TILE..=i1 / TILE {
            for tx in j0 / TILE..=j1 / TILE {
                tile_lists[ty * tiles_x + tx].push(gi as u32);
            }
        }
    }

    struct TileBuf {
        features: Vec<f64>,
        mass: Vec<f64>,
    }

    let tile_bufs: Vec<TileBuf> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let ty = t / tiles_x;
            let tx = t % tiles_x;
            let row_base = ty * TILE;
            let col_base = tx * TILE;
            let tile_rows = TILE.min(rows - row_base);
            let tile_cols = TILE.min(cols - col_base);
            let mut buf = TileBuf {
                features: vec![0.0; tile_rows * tile_cols * channels],
                mass: vec![0.0; tile_rows * tile_cols],
            };
            for &gi in list {
                let p = &prepared[gi as usize];
                let g = &gaussians[gi as usize];
                let (bi0, bi1, bj0, bj1) = p.bounds.expect("binned gaussian has bounds");
                let i0 = bi0.max(row_base);
                let i1 = bi1.min(row_base + tile_rows - 1);
                let j0 = bj0.max(col_base);
                let j1 = bj1.min(col_base + tile_cols - 1);
                for i in i0..=i1 {
                    let cy = spec.y_lo + (i as f64 + 0.5) * spec.resolution;
                    let dy = cy - p.mean.y;
                    for j in j0..=j1 {
                        let cx = spec.x_lo + (j as f64 + 0.5) * spec.resolution;
                        let dx = cx - p.mean.x;
                        let m2 = dx * dx * p.inv_a + 2.0 * dx * dy * p.inv_b + dy * dy * p.inv_d;
                        if m2 > trunc_sq {
                            continue;
                        }
                        let contrib = p.amp * (-0.5 * m2).exp();
                        let cell = (i - row_base) * tile_cols + (j - col_base);
                        buf.mass[cell] += contrib;
                        let base = cell * channels;
                        for (k, &f) in g.feature.iter().enumerate() {
                            buf.features[base + k] += contrib * f;
                        }
                    }
                }
            }
            buf
        })
        .collect();

    // Ordered write-back; tiles own disjoint cells.
    let mut raster = BevRaster::zeros(*spec);
    for (t, buf) in tile_bufs.iter().enumerate() {
        let ty = t / tiles_x;
        let tx = t % tiles_x;
        let row_base = ty * TILE;
        let col_base = tx * TILE;
        let tile_rows = TILE.min(rows - row_base);
        let tile_cols = TILE.min(cols - col_base);
        for r in 0..tile_rows {
            let src_mass = &buf.mass[r * tile_cols..(r + 1) * tile_cols];
            let dst_cell = (row_base + r) * cols + col_base;
            raster.mass[dst_cell..dst_cell + tile_cols].copy_from_slice(src_mass);
            let src_feat = &buf.features[r * tile_cols * channels..(r + 1) * tile_cols * channels];
            let dst = dst_cell * channels;
            raster.features[dst..dst + tile_cols * channels].copy_from_slice(src_feat);
        }
    }

    if normalize {
        raster.normalize_features();
    }
    Ok(raster)
}

/// Analytic gradients of the un-normalized forward map.
///
/// `grad_features` and `grad_mass` are the upstream gradients with the
/// raster's shapes; `gaussians`, `spec`, and `trunc_sigma` must be the
/// saved forward inputs (identical truncation). Gradients follow from the
/// normal density: `dN/dmean = N * inv * delta` and
/// `dN/dcov = N/2 * (inv delta delta^T inv - inv)`, restricted to the
/// truncated support.
pub fn splat_backward(
    grad_features: &[f64],
    grad_mass: &[f64],
    gaussians: &[Gaussian2],
    spec: &BevGridSpec,
    trunc_sigma: f64,
) -> Result<Vec<GaussianGrad>, SplatError> {
    let rows = spec.rows();
    let cols = spec.cols();
    let channels = spec.channels();
    if grad_features.len() != rows * cols * channels {
        return Err(SplatError::DimensionMismatch(format!(
            "grad_features has {} values, raster needs {}",
            grad_features.len(),
            rows * cols * channels
        )));
    }
    if grad_mass.len() != rows * cols {
        return Err(SplatError::DimensionMismatch(format!(
            "grad_mass has {} values, raster needs {}",
            grad_mass.len(),
            rows * cols
        )));
    }
    let trunc_ok = trunc_sigma > 0.0;
    if !trunc_ok {
        return Err(SplatError::Domain(format!(
            "trunc_sigma must be positive, got {trunc_sigma}"
        )));
    }
    let trunc_sq = trunc_sigma * trunc_sigma;

    gaussians
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let p = prepare(g, spec, trunc_sigma, gi)?;
            let mut grad = GaussianGrad::zeros(channels);
            let Some((i0, i1, j0, j1)) = p.bounds else {
                return Ok(grad);
            };
            for i in i0..=i1 {
                let cy = spec.y_lo + (i as f64 + 0.5) * spec.resolution;
                let dy = cy - p.mean.y;
                for j in j0..=j1 {
                    let cx = spec.x_lo + (j as f64 + 0.5) * spec.resolution;
                    let dx = cx - p.mean.x;
                    let m2 = dx * dx * p.inv_a + 2.0 * dx * dy * p.inv_b + dy * dy * p.inv_d;
                    if m2 > trunc_sq {
                        continue;
                    }
                    let cell = i * cols + j;
                    let g_feat = &grad_features[cell * channels..(cell + 1) * channels];
                    // Density * area, without the weight factor.
                    let ga = p.density_amp * (-0.5 * m2).exp();
                    let contrib = g.weight * ga;
                    let mut upstream = grad_mass[cell];
                    for (k, &f) in g.feature.iter().enumerate() {
                        upstream += g_feat[k] * f;
                        grad.feature[k] += g_feat[k] * contrib;
                    }
                    grad.weight += upstream * ga;
                    let common = upstream * contrib;
                    // inv * delta
                    let ix = p.inv_a * dx + p.inv_b * dy;
                    let iy = p.inv_b * dx + p.inv_d * dy;
                    grad.mean.x += common * ix;
                    grad.mean.y += common * iy;
                    grad.cov[(0, 0)] += common * 0.5 * (ix * ix - p.inv_a);
                    let off = common * 0.5 * (ix * iy - p.inv_b);
                    grad.cov[(0, 1)] += off;
                    grad.cov[(1, 0)] += off;
                    grad.cov[(1, 1)] += common * 0.5 * (iy * iy - p.inv_d);
                }
            }
            Ok(grad)
        })
        .collect()
}

/// Backward pass of [`BevRaster::normalize_features`].
///
/// Given upstream gradients with respect to the normalized features,
/// returns gradients with respect to the un-normalized features and the
/// mass plane. Where the mass is at or below the normalization floor the
/// denominator is the constant floor, so the mass gradient vanishes.
pub fn normalize_backward(
    grad_normalized: &[f64],
    features: &[f64],
    mass: &[f64],
    channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(grad_normalized.len(), features.len());
    assert_eq!(features.len(), mass.len() * channels);
    let mut grad_features = vec![0.0; features.len()];
    let mut grad_mass = vec![0.0; mass.len()];
    for (cell, &m) in mass.iter().enumerate() {
        let denom = m.max(NORMALIZE_EPS);
        let base = cell * channels;
        let mut mass_term = 0.0;
        for k in 0..channels {
            let g = grad_normalized[base + k];
            grad_features[base + k] = g / denom;
            mass_term += g * features[base + k];
        }
        if m > NORMALIZE_EPS {
            grad_mass[cell] = -mass_term / (denom * denom);
        }
    }
    (grad_features, grad_mass)
}

/// Resampling mode for [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Resamples a raster to a new resolution over the same extents.
///
/// Format-parity utility (e.g. 64x48 at 0.375 m to 240x180 at 0.1 m);
/// it is not differentiable and not part of the training chain.
pub fn resample(
    raster: &BevRaster,
    resolution: f64,
    mode: ResampleMode,
) -> Result<BevRaster, SplatError> {
    let src = raster.spec();
    let spec = BevGridSpec::new(src.x_range(), src.y_range(), resolution, src.channels())?;
    let mut out = BevRaster::zeros(spec);
    let channels = spec.channels();
    let src_rows = src.rows() as isize;
    let src_cols = src.cols() as isize;
    for i in 0..spec.rows() {
        for j in 0..spec.cols() {
            let center = spec.cell_center(i, j);
            let (fc, fr) = world_to_cell(&center, src);
            let cell = i * spec.cols() + j;
            match mode {
                ResampleMode::Nearest => {
                    let sj = (fc.round() as isize).clamp(0, src_cols - 1) as usize;
                    let si = (fr.round() as isize).clamp(0, src_rows - 1) as usize;
                    out.mass[cell] = raster.mass_at(si, sj);
                    out.features[cell * channels..(cell + 1) * channels]
                        .copy_from_slice(raster.feature_at(si, sj));
                }
                ResampleMode::Bilinear => {
                    let j0 = (fc.floor() as isize).clamp(0, src_cols - 1);
                    let i0 = (fr.floor() as isize).clamp(0, src_rows - 1);
                    let j1 = (j0 + 1).min(src_cols - 1);
                    let i1 = (i0 + 1).min(src_rows - 1);
                    let tx = (fc - j0 as f64).clamp(0.0, 1.0);
                    let ty = (fr - i0 as f64).clamp(0.0, 1.0);
                    let corners = [
                        (i0 as usize, j0 as usize, (1.0 - tx) * (1.0 - ty)),
                        (i0 as usize, j1 as usize, tx * (1.0 - ty)),
                        (i1 as usize, j0 as usize, (1.0 - tx) * ty),
                        (i1 as usize, j1 as usize, tx * ty),
                    ];
                    for (si, sj, w) in corners {
                        out.mass[cell] += w * raster.mass_at(si, sj);
                        let src_f = raster.feature_at(si, sj);
                        let dst = &mut out.features[cell * channels..(cell + 1) * channels];
                        for (d, s) in dst.iter_mut().zip(src_f) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::compose_covariance;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    fn iso_gaussian(x: f64, y: f64, std: f64, weight: f64, feature: Vec<f64>) -> Gaussian2 {
        Gaussian2 {
            mean: Vector2::new(x, y),
            cov: Matrix2::identity() * (std * std),
            weight,
            feature,
        }
    }

    #[test]
    fn grid_spec_default_is_64_by_48() {
        let spec = BevGridSpec::default_grid(3);
        assert_eq!(spec.cols(), 64);
        assert_eq!(spec.rows(), 48);
        assert_eq!(spec.cell_area(), 0.375 * 0.375);
    }

    #[test]
    fn grid_spec_rejects_uneven_extents() {
        assert!(BevGridSpec::new([0.0, 1.0], [0.0, 1.0], 0.3, 1).is_err());
    }

    #[test]
    fn world_to_cell_corners_and_midpoint() {
        let spec = BevGridSpec::default_grid(1);
        let first = spec.cell_center(0, 0);
        assert_eq!(world_to_cell(&first, &spec), (0.0, 0.0));
        assert_eq!(world_to_cell(&Vector2::new(0.0, 0.0), &spec), (31.5, 23.5));
        assert_eq!(world_to_cell(&Vector2::new(12.0, 9.0), &spec), (63.5, 47.5));
        // Out-of-range coordinates come back as-is for the caller to clamp.
        let (col, row) = world_to_cell(&Vector2::new(-15.0, 20.0), &spec);
        assert_eq!(col, -8.5);
        assert_eq!(row, (20.0 + 9.0) / 0.375 - 0.5);
    }

    #[test]
    fn argmax_ties_break_toward_the_lowest_class() {
        let spec = BevGridSpec::new([0.0, 1.0], [0.0, 1.0], 1.0, 3).unwrap();
        let mut raster = BevRaster::zeros(spec);
        // All-zero features: full tie.
        assert_eq!(raster.argmax_classes(), vec![0]);
        raster.features_mut()[1] = 2.0;
        raster.features_mut()[2] = 2.0;
        assert_eq!(raster.argmax_classes(), vec![1]);
    }

    #[test]
    fn marginalization_extracts_ground_block() {
        let g3 = Gaussian3 {
            mean: Vector3::new(1.0, 2.0, 3.0),
            cov: Matrix3::identity(),
            weight: 0.5,
            feature: vec![1.0, 0.0],
        };
        let g2 = marginalize_to_ground(&g3);
        assert_eq!(g2.mean, Vector2::new(1.0, 2.0));
        assert_eq!(g2.cov, Matrix2::identity());
        assert_eq!(g2.weight, 0.5);

        let delta = Vector3::new(0.4, -0.3, 0.2);
        let cov = compose_covariance(0.25, &delta, 1e-4).unwrap();
        let g2 = marginalize_to_ground(&Gaussian3 {
            mean: Vector3::zeros(),
            cov,
            weight: 1.0,
            feature: vec![0.0, 0.0],
        });
        let expected = Matrix2::identity() * 0.0625
            + Vector2::new(0.4, -0.3) * Vector2::new(0.4, -0.3).transpose();
        assert_relative_eq!((g2.cov - expected).abs().max(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn marginal_matches_numerical_z_integration() {
        // Quadrature oracle: integrate the 3D density over z on a fine grid
        // and compare against the 2D marginal density at several points.
        let cov = compose_covariance(0.6, &Vector3::new(0.5, 0.3, 0.7), 1e-4).unwrap();
        let mean = Vector3::new(0.2, -0.1, 0.4);
        let g2 = marginalize_to_ground(&Gaussian3 {
            mean,
            cov,
            weight: 1.0,
            feature: vec![],
        });
        let inv3 = cov.try_inverse().unwrap();
        let det3 = cov.determinant();
        let norm3 = 1.0 / ((2.0 * std::f64::consts::PI).powf(1.5) * det3.sqrt());
        let det2 = g2.cov.determinant();
        let inv2 = g2.cov.try_inverse().unwrap();
        let norm2 = 1.0 / (2.0 * std::f64::consts::PI * det2.sqrt());
        for (px, py) in [(0.0, 0.0), (0.7, -0.5), (-0.4, 0.6)] {
            let mut integral = 0.0;
            let steps = 4000;
            let z_span = 12.0;
            let dz = z_span / steps as f64;
            for s in 0..steps {
                let z = mean.z - z_span / 2.0 + (s as f64 + 0.5) * dz;
                let d = Vector3::new(px, py, z) - mean;
                integral += norm3 * (-0.5 * (d.transpose() * inv3 * d)[0]).exp() * dz;
            }
            let d2 = Vector2::new(px, py) - g2.mean;
            let marginal = norm2 * (-0.5 * (d2.transpose() * inv2 * d2)[0]).exp();
            assert_relative_eq!(integral, marginal, max_relative = 1e-3);
        }
    }

    #[test]
    fn empty_input_gives_zero_raster() {
        let spec = BevGridSpec::default_grid(2);
        let raster = splat_forward(&[], &spec, 3.0, false).unwrap();
        assert!(raster.features().iter().all(|&v| v == 0.0));
        assert!(raster.mass().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_gaussian_conserves_mass() {
        let spec = BevGridSpec::default_grid(1);
        let weight = 0.73;
        let g = iso_gaussian(0.0, 0.0, 1.0, weight, vec![1.0]);
        let raster = splat_forward(&[g], &spec, 6.0, false).unwrap();
        let total = raster.total_mass();
        assert!(
            (total - weight).abs() < 0.01 * weight,
            "accumulated {total}, expected about {weight}"
        );
    }

    #[test]
    fn doubling_a_gaussian_doubles_the_raster() {
        let spec = BevGridSpec::default_grid(2);
        let g = iso_gaussian(1.0, -2.0, 0.8, 0.5, vec![0.3, 0.7]);
        let single = splat_forward(std::slice::from_ref(&g), &spec, 3.0, false).unwrap();
        let double = splat_forward(&[g.clone(), g], &spec, 3.0, false).unwrap();
        for (a, b) in single.mass().iter().zip(double.mass()) {
            assert_eq!(*b, 2.0 * *a);
        }
        for (a, b) in single.features().iter().zip(double.features()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn splatting_is_additive_over_input_partition() {
        let spec = BevGridSpec::default_grid(1);
        let a = iso_gaussian(2.0, 1.0, 0.9, 1.0, vec![1.0]);
        let b = iso_gaussian(-3.0, -1.5, 1.4, 0.6, vec![2.0]);
        let ab = splat_forward(&[a.clone(), b.clone()], &spec, 4.0, false).unwrap();
        let ra = splat_forward(&[a], &spec, 4.0, false).unwrap();
        let rb = splat_forward(&[b], &spec, 4.0, false).unwrap();
        for ((m_ab, m_a), m_b) in ab.mass().iter().zip(ra.mass()).zip(rb.mass()) {
            assert_eq!(*m_ab, m_a + m_b);
        }
    }

    #[test]
    fn untruncated_forward_matches_dense_oracle_bitwise() {
        // Naive all-cells evaluation with the same per-cell summation order.
        let spec = BevGridSpec::default_grid(2);
        let mut state = 0x853c49e6748fea9b_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..20 {
            let mut gaussians = Vec::new();
            for _ in 0..12 {
                let l1 = 0.1 + 2.0 * next();
                let l2 = 0.1 + 2.0 * next();
                let ang = std::f64::consts::PI * next();
                let (s, c) = ang.sin_cos();
                let a = c * c * l1 + s * s * l2;
                let b = s * c * (l1 - l2);
                let d = s * s * l1 + c * c * l2;
                gaussians.push(Gaussian2 {
                    mean: Vector2::new(24.0 * next() - 12.0, 18.0 * next() - 9.0),
                    cov: Matrix2::new(a, b, b, d),
                    weight: 0.1 + next(),
                    feature: vec![next(), next()],
                });
            }
            let raster = splat_forward(&gaussians, &spec, f64::INFINITY, false).unwrap();

            let mut mass = vec![0.0_f64; spec.rows() * spec.cols()];
            let mut feats = vec![0.0_f64; spec.rows() * spec.cols() * 2];
            for g in &gaussians {
                let a = g.cov[(0, 0)];
                let b = g.cov[(0, 1)];
                let d = g.cov[(1, 1)];
                let det = a * d - b * b;
                let inv_a = d / det;
                let inv_b = -b / det;
                let inv_d = a / det;
                let amp = g.weight * (1.0 / (2.0 * std::f64::consts::PI * det.sqrt()))
                    * spec.cell_area();
                for i in 0..spec.rows() {
                    let cy = spec.y_range()[0] + (i as f64 + 0.5) * spec.resolution();
                    let dy = cy - g.mean.y;
                    for j in 0..spec.cols() {
                        let cx = spec.x_range()[0] + (j as f64 + 0.5) * spec.resolution();
                        let dx = cx - g.mean.x;
                        let m2 = dx * dx * inv_a + 2.0 * dx * dy * inv_b + dy * dy * inv_d;
                        let contrib = amp * (-0.5 * m2).exp();
                        let cell = i * spec.cols() + j;
                        mass[cell] += contrib;
                        feats[cell * 2] += contrib * g.feature[0];
                        feats[cell * 2 + 1] += contrib * g.feature[1];
                    }
                }
            }
            assert_eq!(raster.mass(), &mass[..]);
            assert_eq!(raster.features(), &feats[..]);
        }
    }

    #[test]
    fn forward_is_deterministic_across_thread_counts() {
        let spec = BevGridSpec::default_grid(3);
        let gaussians: Vec<Gaussian2> = (0..400)
            .map(|k| {
                let t = k as f64 * 0.137;
                iso_gaussian(
                    10.0 * (t.sin()),
                    7.0 * (1.7 * t).cos(),
                    0.3 + 0.1 * (k % 7) as f64,
                    0.2 + 0.01 * (k % 13) as f64,
                    vec![t.sin(), t.cos(), 1.0],
                )
            })
            .collect();
        let mut outputs: Vec<Vec<u8>> = Vec::new();
        for threads in [1, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let bytes =
                pool.install(|| splat_forward(&gaussians, &spec, 3.0, false).unwrap().to_bytes());
            outputs.push(bytes);
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let spec = BevGridSpec::default_grid(1);
        let g = Gaussian2 {
            mean: Vector2::zeros(),
            cov: Matrix2::new(1.0, 2.0, 2.0, 1.0),
            weight: 1.0,
            feature: vec![0.0],
        };
        assert!(matches!(
            splat_forward(&[g], &spec, 3.0, false),
            Err(SplatError::Domain(_))
        ));
    }

    #[test]
    fn non_finite_mean_is_rejected() {
        let spec = BevGridSpec::default_grid(1);
        let g = Gaussian2 {
            mean: Vector2::new(f64::NAN, 0.0),
            cov: Matrix2::identity(),
            weight: 1.0,
            feature: vec![0.0],
        };
        assert!(matches!(
            splat_forward(&[g], &spec, 3.0, false),
            Err(SplatError::Domain(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let spec = BevGridSpec::default_grid(2);
        let gaussians = vec![iso_gaussian(0.5, 0.5, 1.0, 0.7, vec![0.2, 0.8])];
        let zeros_f = vec![0.0; spec.rows() * spec.cols() * 2];
        let zeros_m = vec![0.0; spec.rows() * spec.cols()];
        let grads = splat_backward(&zeros_f, &zeros_m, &gaussians, &spec, 8.0).unwrap();
        assert_eq!(grads[0], GaussianGrad::zeros(2));
    }

    #[test]
    fn feature_gradient_is_the_contribution_contraction() {
        // d loss / d feature_k = sum_cells grad_features[cell][k] * contribution(cell),
        // by linearity of the forward map in the feature payload.
        let spec = BevGridSpec::default_grid(2);
        let g = iso_gaussian(1.0, 0.5, 0.9, 0.6, vec![0.3, -0.4]);
        let raster = splat_forward(std::slice::from_ref(&g), &spec, 8.0, false).unwrap();
        // Contribution map equals mass here because the weight is in `amp`.
        let mut grad_f = vec![0.0; spec.rows() * spec.cols() * 2];
        for (cell, chunk) in grad_f.chunks_exact_mut(2).enumerate() {
            chunk[0] = (cell % 5) as f64 * 0.21 - 0.4;
            chunk[1] = (cell % 3) as f64 * 0.17 - 0.2;
        }
        let grad_m = vec![0.0; spec.rows() * spec.cols()];
        let grads = splat_backward(&grad_f, &grad_m, &[g], &spec, 8.0).unwrap();
        let mut expected = [0.0_f64; 2];
        for (cell, &m) in raster.mass().iter().enumerate() {
            expected[0] += grad_f[cell * 2] * m;
            expected[1] += grad_f[cell * 2 + 1] * m;
        }
        assert_relative_eq!(grads[0].feature[0], expected[0], max_relative = 1e-12);
        assert_relative_eq!(grads[0].feature[1], expected[1], max_relative = 1e-12);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let channels = 3;
        let cells = 8;
        let mut features: Vec<f64> = (0..cells * channels).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut mass: Vec<f64> = (0..cells)
            .map(|i| if i % 4 == 3 { 0.0 } else { 0.2 + 0.1 * i as f64 })
            .collect();
        // Zero-mass cells accumulate zero features in a real raster; a
        // nonzero feature over the eps denominator would also swamp the
        // finite differences below.
        for (cell, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                for k in 0..channels {
                    features[cell * channels + k] = 0.0;
                }
            }
        }
        let upstream: Vec<f64> = (0..cells * channels).map(|i| (i as f64 * 0.53).cos()).collect();

        let objective = |features: &[f64], mass: &[f64]| -> f64 {
            let mut sum = 0.0;
            for cell in 0..cells {
                let denom = mass[cell].max(NORMALIZE_EPS);
                for k in 0..channels {
                    sum += upstream[cell * channels + k] * features[cell * channels + k] / denom;
                }
            }
            sum
        };

        let (gf, gm) = normalize_backward(&upstream, &features, &mass, channels);
        let h = 1e-6;
        for idx in [0, 5, 12, 17] {
            let orig = features[idx];
            features[idx] = orig + h;
            let hi = objective(&features, &mass);
            features[idx] = orig - h;
            let lo = objective(&features, &mass);
            features[idx] = orig;
            assert_relative_eq!(gf[idx], (hi - lo) / (2.0 * h), max_relative = 1e-6);
        }
        for idx in [0, 2, 5] {
            let orig = mass[idx];
            mass[idx] = orig + h;
            let hi = objective(&features, &mass);
            mass[idx] = orig - h;
            let lo = objective(&features, &mass);
            mass[idx] = orig;
            assert_relative_eq!(gm[idx], (hi - lo) / (2.0 * h), max_relative = 1e-5);
        }
        // Floored cell: denominator is constant, mass gradient must vanish.
        assert_eq!(gm[3], 0.0);
    }

    #[test]
    fn raster_round_trips_through_bevr() {
        let spec = BevGridSpec::default_grid(2);
        let g = iso_gaussian(0.2, -0.3, 1.1, 0.9, vec![0.25, 0.5]);
        let raster = splat_forward(&[g], &spec, 3.0, false).unwrap();
        let bytes = raster.to_bytes();
        let back = BevRaster::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec(), raster.spec());
        // f32 casts are lossy against f64 but stable across a save cycle.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bevr_rejects_bad_magic() {
        let spec = BevGridSpec::default_grid(1);
        let mut bytes = BevRaster::zeros(spec).to_bytes();
        bytes[0] = b'Z';
        assert!(BevRaster::from_bytes(&bytes).is_err());
    }

    #[test]
    fn bilinear_resample_reproduces_linear_ramps_in_the_interior() {
        let spec = BevGridSpec::default_grid(1);
        let mut raster = BevRaster::zeros(spec);
        for i in 0..spec.rows() {
            for j in 0..spec.cols() {
                let c = spec.cell_center(i, j);
                raster.features_mut()[i * spec.cols() + j] = 2.0 + 3.0 * c.x + 5.0 * c.y;
            }
        }
        let fine = resample(&raster, 0.125, ResampleMode::Bilinear).unwrap();
        let fs = *fine.spec();
        for i in 0..fs.rows() {
            for j in 0..fs.cols() {
                let c = fs.cell_center(i, j);
                // Edge cells clamp to constant extrapolation; skip them.
                let (fc, fr) = world_to_cell(&c, &spec);
                if fc < 0.0 || fr < 0.0 || fc > (spec.cols() - 1) as f64 || fr > (spec.rows() - 1) as f64
                {
                    continue;
                }
                let expected = 2.0 + 3.0 * c.x + 5.0 * c.y;
                let got = fine.features()[i * fs.cols() + j];
                assert!(
                    (got - expected).abs() < 1e-9,
                    "cell ({i}, {j}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn resample_nearest_preserves_constant_regions() {
        let spec = BevGridSpec::default_grid(1);
        let mut raster = BevRaster::zeros(spec);
        for v in raster.features_mut().iter_mut() {
            *v = 4.25;
        }
        let fine = resample(&raster, 0.1, ResampleMode::Nearest).unwrap();
        assert_eq!(fine.spec().cols(), 240);
        assert_eq!(fine.spec().rows(), 180);
        assert!(fine.features().iter().all(|&v| v == 4.25));
        let fine = resample(&raster, 0.1, ResampleMode::Bilinear).unwrap();
        assert!(fine.features().iter().all(|&v| (v - 4.25).abs() < 1e-12));
    }
}
