//! Deterministic synthetic scenes and a fisheye ray-cast renderer.
//!
//! The desk-scale oracle: a rectangular drivable region on the ground
//! plane plus yaw-rotated boxes standing in for vehicles. Views are
//! rendered by casting the LUT rays of each camera against the ground
//! plane and the boxes (nearest hit wins), which makes the renderer the
//! geometric dual of the projection model. Ground truth comes from
//! point-sampling cell centers, matching the splatter's cell-center
//! convention.
//!
//! Classes are fixed: 0 background, 1 drivable, 2 vehicle.
//!
//! Scene files are plain text: `seed <n>`, `polygon <x0> <y0> ...`, and
//! one `box <cx> <cy> <cz> <sx> <sy> <sz> <yaw> <class>` line per box.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraExtrinsics, CameraGeometryError, FisheyeCamera, FisheyeIntrinsics};
use crate::field::PixelField;
use crate::lift::{DepthBinSpec, DepthDistribution};
use crate::lut::RayLut;
use crate::splat::BevGridSpec;
use crate::train::{BevLabels, TrainError};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_DRIVABLE: u8 = 1;
pub const CLASS_VEHICLE: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("scene parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Camera(#[from] CameraGeometryError),
    #[error(transparent)]
    Labels(#[from] TrainError),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

/// An upright box obstacle, yaw-rotated about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxObstacle {
    /// Centroid in world coordinates, meters.
    pub center: Vector3<f64>,
    /// Full extents along the box's local axes, meters.
    pub size: Vector3<f64>,
    /// Rotation about world-up, radians.
    pub yaw: f64,
    pub class_id: u8,
}

impl BoxObstacle {
    /// Ground-plane corners of the footprint, counter-clockwise.
    pub fn footprint_corners(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.size.x;
        let hy = 0.5 * self.size.y;
        let rot = |lx: f64, ly: f64| {
            Vector2::new(
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            )
        };
        [rot(-hx, -hy), rot(hx, -hy), rot(hx, hy), rot(-hx, hy)]
    }

    /// Whether a ground point lies inside the footprint.
    pub fn footprint_contains(&self, p: &Vector2<f64>) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        // Rotate into the box frame.
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.size.x && ly.abs() <= 0.5 * self.size.y
    }
}

/// A synthetic world: drivable polygon on the ground plane plus boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub drivable_polygon: Vec<Vector2<f64>>,
    pub boxes: Vec<BoxObstacle>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.drivable_polygon.len() < 3 {
            return Err(SynthError::InvalidScene(
                "drivable polygon needs at least 3 vertices".to_string(),
            ));
        }
        if !polygon_is_simple(&self.drivable_polygon) {
            return Err(SynthError::InvalidScene(
                "drivable polygon is self-intersecting".to_string(),
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let positive = b.size.x > 0.0 && b.size.y > 0.0 && b.size.z > 0.0;
            if !positive {
                return Err(SynthError::InvalidScene(format!("box {i} has non-positive size")));
            }
        }
        Ok(())
    }
}

/// Scene generator configuration.
#[derive(Debug, Clone)]
pub struct SceneGenConfig {
    /// Inclusive range of box counts.
    pub box_count: (usize, usize),
    /// Axis-aligned drivable rectangle `[x_lo, x_hi, y_lo, y_hi]`, meters.
    pub drivable_rect: [f64; 4],
    /// Placement rectangle for box centers, meters.
    pub placement_rect: [f64; 4],
    /// Boxes keep their whole footprint at least this far from the origin.
    pub keep_clear_radius: f64,
    /// Minimum footprint-to-footprint spacing between boxes, meters.
    pub min_gap: f64,
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Placement attempts per box before giving up.
    pub max_retries: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            box_count: (2, 4),
            // The pad extends past the 24 m x 18 m grid: at desk-scale
            // image resolution a far-field label boundary inside the grid
            // would sit in a multi-cell blur band.
            drivable_rect: [-16.0, 16.0, -11.0, 11.0],
            placement_rect: [-8.0, 8.0, -5.5, 5.5],
            keep_clear_radius: 3.0,
            min_gap: 1.2,
            length_range: (3.4, 4.5),
            width_range: (1.9, 2.5),
            // Below the camera height, so the rig sees box tops and the
            // geometric oracle covers whole footprints.
            height_range: (0.35, 0.55),
            max_retries: 500,
        }
    }
}

/// Deterministically generates a scene from a seed.
///
/// The drivable region is a rectangle; boxes are yaw-rotated, mutually
/// non-overlapping (separating-axis test), keep clear of the ego origin,
/// and keep their footprint inside the placement rectangle.
pub fn gen_scene(seed: u64, cfg: &SceneGenConfig) -> Result<Scene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [dx_lo, dx_hi, dy_lo, dy_hi] = cfg.drivable_rect;
    let polygon = vec![
        Vector2::new(dx_lo, dy_lo),
        Vector2::new(dx_hi, dy_lo),
        Vector2::new(dx_hi, dy_hi),
        Vector2::new(dx_lo, dy_hi),
    ];
    let count = rng.gen_range(cfg.box_count.0..=cfg.box_count.1);
    let [px_lo, px_hi, py_lo, py_hi] = cfg.placement_rect;
    let mut boxes: Vec<BoxObstacle> = Vec::with_capacity(count);
    'boxes: for b in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let length = rng.gen_range(cfg.length_range.0..=cfg.length_range.1);
            let width = rng.gen_range(cfg.width_range.0..=cfg.width_range.1);
            let height = rng.gen_range(cfg.height_range.0..=cfg.height_range.1);
            let yaw = rng.gen_range(0.0..std::f64::consts::PI);
            let cx = rng.gen_range(px_lo..=px_hi);
            let cy = rng.gen_range(py_lo..=py_hi);
            let candidate = BoxObstacle {
                center: Vector3::new(cx, cy, 0.5 * height),
                size: Vector3::new(length, width, height),
                yaw,
                class_id: CLASS_VEHICLE,
            };
            let corners = candidate.footprint_corners();
            let inside = corners
                .iter()
                .all(|c| c.x >= px_lo && c.x <= px_hi && c.y >= py_lo && c.y <= py_hi);
            let clear = corners.iter().all(|c| c.norm() >= cfg.keep_clear_radius)
                && Vector2::new(cx, cy).norm() >= cfg.keep_clear_radius;
            // Spacing test runs on footprints grown by min_gap.
            let grown = BoxObstacle {
                size: candidate.size + Vector3::new(cfg.min_gap, cfg.min_gap, 0.0),
                ..candidate
            }
            .footprint_corners();
            let overlaps = boxes.iter().any(|other| {
                let other_grown = BoxObstacle {
                    size: other.size + Vector3::new(cfg.min_gap, cfg.min_gap, 0.0),
                    ..*other
                }
                .footprint_corners();
                footprints_overlap(&grown, &other_grown)
            });
            if inside && clear && !overlaps {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            // A crowded draw may not fit the sampled count; settle for
            // fewer as long as the configured minimum is met.
            if boxes.len() >= cfg.box_count.0 {
                break 'boxes;
            }
            return Err(SynthError::Generation(format!(
                "could not place box {b} after {} attempts (seed {seed})",
                cfg.max_retries
            )));
        }
    }
    let scene = Scene {
        drivable_polygon: polygon,
        boxes,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

/// Separating-axis test for two convex quadrilaterals.
pub fn footprints_overlap(a: &[Vector2<f64>; 4], b: &[Vector2<f64>; 4]) -> bool {
    let project = |quad: &[Vector2<f64>; 4], axis: &Vector2<f64>| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in quad {
            let p = axis.dot(c);
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    };
    for quad in [a, b] {
        for i in 0..4 {
            let edge = quad[(i + 1) % 4] - quad[i];
            let axis = Vector2::new(-edge.y, edge.x);
            let (a_lo, a_hi) = project(a, &axis);
            let (b_lo, b_hi) = project(b, &axis);
            if a_hi < b_lo || b_hi < a_lo {
                return false;
            }
        }
    }
    true
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: &Vector2<f64>, polygon: &[Vector2<f64>]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn polygon_is_simple(polygon: &[Vector2<f64>]) -> bool {
    let n = polygon.len();
    let segments: Vec<(Vector2<f64>, Vector2<f64>)> = (0..n)
        .map(|i| (polygon[i], polygon[(i + 1) % n]))
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            // Adjacent segments share an endpoint by construction.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(segments[i], segments[j]) {
                return false;
            }
        }
    }
    true
}

fn segments_intersect(s1: (Vector2<f64>, Vector2<f64>), s2: (Vector2<f64>, Vector2<f64>)) -> bool {
    let orient = |a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>| {
        (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
    };
    let (a, b) = s1;
    let (c, d) = s2;
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// One rendered fisheye view at LUT resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    /// Class id per pixel; background where nothing is hit.
    pub semantic: Vec<u8>,
    /// Range along the ray in meters; +inf where nothing is hit or the
    /// LUT entry is invalid.
    pub depth: Vec<f64>,
}

impl RenderedView {
    pub fn semantic_at(&self, row: usize, col: usize) -> u8 {
        self.semantic[row * self.width + col]
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }
}

/// Casts every valid LUT ray of a camera against the scene.
///
/// Ray origin is the camera position, direction the world-frame LUT ray.
/// The nearest hit among the ground plane and all boxes decides class and
/// range; ground hits are drivable inside the polygon and background
/// outside it.
pub fn render_view(scene: &Scene, ext: &CameraExtrinsics, lut: &RayLut) -> RenderedView {
    let width = lut.width();
    let height = lut.height();
    let origin = ext.position();
    let rotation = *ext.rotation();

    let mut semantic = vec![CLASS_BACKGROUND; width * height];
    let mut depth = vec![f64::INFINITY; width * height];

    semantic
        .par_chunks_exact_mut(width)
        .zip(depth.par_chunks_exact_mut(width))
        .enumerate()
        .for_each(|(i, (sem_row, depth_row))| {
            for j in 0..width {
                let Some(d) = lut.direction(i, j) else { continue };
                let dir = rotation * Vector3::new(f64::from(d[0]), f64::from(d[1]), f64::from(d[2]));
                let (class, range) = cast_ray(scene, &origin, &dir);
                sem_row[j] = class;
                depth_row[j] = range;
            }
        });

    RenderedView {
        width,
        height,
        semantic,
        depth,
    }
}

/// Nearest hit of a world ray against ground plane and boxes.
fn cast_ray(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (u8, f64) {
    let mut best_range = f64::INFINITY;
    let mut best_class = CLASS_BACKGROUND;

    if dir.z < 0.0 && origin.z > 0.0 {
        let s = -origin.z / dir.z;
        let hit = Vector2::new(origin.x + s * dir.x, origin.y + s * dir.y);
        best_range = s;
        best_class = if point_in_polygon(&hit, &scene.drivable_polygon) {
            CLASS_DRIVABLE
        } else {
            CLASS_BACKGROUND
        };
    }

    for b in &scene.boxes {
        if let Some(s) = ray_box_intersection(origin, dir, b) {
            if s < best_range {
                best_range = s;
                best_class = b.class_id;
            }
        }
    }
    (best_class, best_range)
}

/// Slab test against a yaw-rotated box. Returns the entry range, or the
/// exit range when the origin is inside.
fn ray_box_intersection(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &BoxObstacle) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let rel = origin - b.center;
    // Rotate into the box frame (inverse yaw); z is unchanged.
    let p = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
    let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);

    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let half = 0.5 * b.size[axis];
        if d[axis] == 0.0 {
            if p[axis].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - p[axis]) / d[axis];
        let t2 = (half - p[axis]) / d[axis];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > 1e-9 {
        Some(t_enter)
    } else if t_exit > 1e-9 {
        Some(t_exit)
    } else {
        None
    }
}

/// Point-samples cell centers into one-hot BEV labels.
///
/// Vehicle wins where the center is inside any box footprint, then
/// drivable inside the polygon, then background. No cells are ignored.
pub fn rasterize_gt_bev(scene: &Scene, grid: &BevGridSpec) -> Result<BevLabels, SynthError> {
    let rows = grid.rows();
    let cols = grid.cols();
    let mut ids = vec![CLASS_BACKGROUND; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let center = grid.cell_center(i, j);
            let id = if scene.boxes.iter().any(|b| b.footprint_contains(&center)) {
                CLASS_VEHICLE
            } else if point_in_polygon(&center, &scene.drivable_polygon) {
                CLASS_DRIVABLE
            } else {
                CLASS_BACKGROUND
            };
            ids[i * cols + j] = id;
        }
    }
    Ok(BevLabels::from_class_ids(rows, cols, NUM_CLASSES, ids, None)?)
}

/// Perfect-prediction inputs derived from a rendered view.
#[derive(Debug, Clone)]
pub struct OracleInputs {
    /// One-hot depth at the bin containing the rendered range; all-zero
    /// rows (excluded pixels) where nothing was hit.
    pub depth: DepthDistribution,
    /// One-hot class payload.
    pub features: PixelField,
    /// Per-pixel sigma: the base value widened by the pixel's footprint.
    pub sigma: PixelField,
}

/// Caps the footprint-driven sigma widening for ground classes, meters.
pub const ORACLE_SIGMA_CAP: f64 = 2.0;

/// Converts a rendered view into one-hot lifting inputs.
///
/// Ranges clamp into the bin range; +inf pixels are excluded with a zero
/// depth row so they lift to nothing. For ground classes the sigma map
/// widens from `base_sigma` to half the largest range gap toward
/// same-class neighbors, capped at [`ORACLE_SIGMA_CAP`]: a grazing ground
/// pixel covers meters of ground, and its lifted Gaussian has to say so
/// or the splat leaves radial gaps between consecutive image rows.
/// Vehicle pixels keep `base_sigma` (widening smears the compact
/// footprints more than it fills them), and silhouette edges never widen
/// sigma.
pub fn make_oracle_inputs(view: &RenderedView, bins: &DepthBinSpec, base_sigma: f64) -> OracleInputs {
    let (w, h) = (view.width, view.height);
    let mut depth = PixelField::zeros(w, h, bins.count());
    let mut features = PixelField::zeros(w, h, NUM_CLASSES);
    let mut sigma = PixelField::constant(w, h, base_sigma);
    for row in 0..h {
        for col in 0..w {
            let range = view.depth_at(row, col);
            if !range.is_finite() {
                continue;
            }
            let bin = bins.bin_for_range(range);
            depth.set(row, col, bin, 1.0);
            let class = view.semantic_at(row, col);
            features.set(row, col, class as usize, 1.0);
            if class == CLASS_VEHICLE {
                continue;
            }

            let mut gap = 0.0_f64;
            let mut consider = |r: isize, c: isize| {
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    return;
                }
                let (r, c) = (r as usize, c as usize);
                let other = view.depth_at(r, c);
                if other.is_finite() && view.semantic_at(r, c) == class {
                    gap = gap.max((other - range).abs());
                }
            };
            consider(row as isize - 1, col as isize);
            consider(row as isize + 1, col as isize);
            consider(row as isize, col as isize - 1);
            consider(row as isize, col as isize + 1);
            sigma.set(row, col, 0, (0.5 * gap).clamp(base_sigma, ORACLE_SIGMA_CAP));
        }
    }
    OracleInputs {
        depth: DepthDistribution::new(depth).expect("one-hot rows are valid"),
        features,
        sigma,
    }
}

// ---------------------------------------------------------------------------
// Default rig
// ---------------------------------------------------------------------------

/// Desk-scale default intrinsics: 128x108 at 95-degree half-FOV.
pub fn default_intrinsics() -> FisheyeIntrinsics {
    FisheyeIntrinsics::new(
        30.0,
        [64.0, 54.0],
        vec![0.6, -0.09, 0.0, 0.0],
        (128, 108),
        95.0_f64.to_radians(),
    )
    .expect("default intrinsics are valid")
}

/// Camera-to-world rotation for a camera yawed about world-up and pitched
/// down. Camera convention: +z optical axis, +x image right, +y image
/// down; world convention: x forward, y left, z up.
pub fn rig_rotation(yaw: f64, pitch_down: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch_down.sin_cos();
    // Columns are the world directions of the camera x, y, z axes for a
    // forward-looking camera pitched down.
    let base = Matrix3::new(
        0.0, -sp, cp, //
        -1.0, 0.0, 0.0, //
        0.0, -cp, -sp,
    );
    let (sy, cy) = yaw.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rz * base
}

/// The default four-camera surround rig: front, rear, left, right, each
/// pitched 20 degrees down.
pub fn default_rig() -> Vec<FisheyeCamera> {
    let intr = default_intrinsics();
    let pitch = 20.0_f64.to_radians();
    let spec = [
        ("front", 0.0_f64, Vector3::new(1.9, 0.0, 0.95)),
        ("rear", 180.0, Vector3::new(-1.9, 0.0, 0.95)),
        ("left", 90.0, Vector3::new(0.0, 0.9, 1.0)),
        ("right", -90.0, Vector3::new(0.0, -0.9, 1.0)),
    ];
    spec.iter()
        .map(|(name, yaw_deg, position)| FisheyeCamera {
            name: (*name).to_string(),
            intrinsics: intr.clone(),
            extrinsics: CameraExtrinsics::new(rig_rotation(yaw_deg.to_radians(), pitch), *position)
                .expect("rig rotations are orthonormal"),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------------

pub fn write_scene(scene: &Scene) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    writeln!(out, "seed {}", scene.seed).unwrap();
    let coords: Vec<String> = scene
        .drivable_polygon
        .iter()
        .flat_map(|v| [format!("{:?}", v.x), format!("{:?}", v.y)])
        .collect();
    writeln!(out, "polygon {}", coords.join(" ")).unwrap();
    for b in &scene.boxes {
        writeln!(
            out,
            "box {:?} {:?} {:?} {:?} {:?} {:?} {:?} {}",
            b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.yaw, b.class_id
        )
        .unwrap();
    }
    out
}

pub fn parse_scene(text: &str) -> Result<Scene, SynthError> {
    let mut seed: Option<u64> = None;
    let mut polygon: Option<Vec<Vector2<f64>>> = None;
    let mut boxes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SynthError::Parse {
            line: line_no,
            message,
        };
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty");
        let args: Vec<&str> = parts.collect();
        match key {
            "seed" => {
                if args.len() != 1 {
                    return Err(err("seed expects one integer".to_string()));
                }
                seed = Some(
                    args[0]
                        .parse::<u64>()
                        .map_err(|e| err(format!("bad seed: {e}")))?,
                );
            }
            "polygon" => {
                if args.len() < 6 || !args.len().is_multiple_of(2) {
                    return Err(err("polygon expects at least 3 x y pairs".to_string()));
                }
                let mut pts = Vec::with_capacity(args.len() / 2);
                for pair in args.chunks_exact(2) {
                    let x = pair[0].parse::<f64>().map_err(|e| err(format!("bad float: {e}")))?;
                    let y = pair[1].parse::<f64>().map_err(|e| err(format!("bad float: {e}")))?;
                    pts.push(Vector2::new(x, y));
                }
                polygon = Some(pts);
            }
            "box" => {
                if args.len() != 8 {
                    return Err(err("box expects 8 values".to_string()));
                }
                let mut vals = [0.0_f64; 7];
                for (slot, a) in vals.iter_mut().zip(&args[..7]) {
                    *slot = a.parse::<f64>().map_err(|e| err(format!("bad float: {e}")))?;
                }
                let class_id = args[7]
                    .parse::<u8>()
                    .map_err(|e| err(format!("bad class id: {e}")))?;
                boxes.push(BoxObstacle {
                    center: Vector3::new(vals[0], vals[1], vals[2]),
                    size: Vector3::new(vals[3], vals[4], vals[5]),
                    yaw: vals[6],
                    class_id,
                });
            }
            other => return Err(err(format!("unknown key '{other}'"))),
        }
    }
    let scene = Scene {
        drivable_polygon: polygon.ok_or(SynthError::Parse {
            line: 0,
            message: "missing 'polygon'".to_string(),
        })?,
        boxes,
        seed: seed.ok_or(SynthError::Parse {
            line: 0,
            message: "missing 'seed'".to_string(),
        })?,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<Scene, SynthError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::build_lut;
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneGenConfig::default();
        let a = gen_scene(7, &cfg).unwrap();
        let b = gen_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn impossible_placement_is_a_generation_error() {
        let cfg = SceneGenConfig {
            box_count: (3, 3),
            placement_rect: [-2.0, 2.0, -2.0, 2.0],
            keep_clear_radius: 3.0,
            max_retries: 50,
            ..SceneGenConfig::default()
        };
        assert!(matches!(
            gen_scene(0, &cfg),
            Err(SynthError::Generation(_))
        ));
    }

    #[test]
    fn zero_boxes_gives_drivable_only_scene() {
        let cfg = SceneGenConfig {
            box_count: (0, 0),
            ..SceneGenConfig::default()
        };
        let scene = gen_scene(3, &cfg).unwrap();
        assert!(scene.boxes.is_empty());
        assert_eq!(scene.drivable_polygon.len(), 4);
    }

    #[test]
    fn generated_boxes_never_overlap() {
        // Independent oracle: pairwise corner containment plus edge
        // intersection, not the generator's SAT.
        let cfg = SceneGenConfig::default();
        for seed in 0..100 {
            let scene = gen_scene(seed, &cfg).unwrap();
            for (i, a) in scene.boxes.iter().enumerate() {
                for b in scene.boxes.iter().skip(i + 1) {
                    let ca = a.footprint_corners();
                    let cb = b.footprint_corners();
                    for p in &cb {
                        assert!(!a.footprint_contains(p), "seed {seed}: corner inside box");
                    }
                    for p in &ca {
                        assert!(!b.footprint_contains(p), "seed {seed}: corner inside box");
                    }
                    for i in 0..4 {
                        for j in 0..4 {
                            let s1 = (ca[i], ca[(i + 1) % 4]);
                            let s2 = (cb[j], cb[(j + 1) % 4]);
                            assert!(
                                !segments_intersect(s1, s2),
                                "seed {seed}: footprint edges cross"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scene_ground_range_is_analytic() {
        // Camera looking straight down from height h: range along a ray at
        // angle alpha from vertical is h / cos(alpha).
        let scene = Scene {
            drivable_polygon: vec![
                Vector2::new(-100.0, -100.0),
                Vector2::new(100.0, -100.0),
                Vector2::new(100.0, 100.0),
                Vector2::new(-100.0, 100.0),
            ],
            boxes: vec![],
            seed: 0,
        };
        let intr = FisheyeIntrinsics::equidistant(20.0, [16.0, 16.0], (32, 32), 1.2).unwrap();
        let lut = build_lut(&intr, 1).unwrap();
        // Optical axis straight down: camera x -> world x, y -> world -y.
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let height = 3.7;
        let ext = CameraExtrinsics::new(rot, Vector3::new(0.0, 0.0, height)).unwrap();
        let view = render_view(&scene, &ext, &lut);
        for i in 0..lut.height() {
            for j in 0..lut.width() {
                let Some(d) = lut.direction(i, j) else { continue };
                assert_eq!(view.semantic_at(i, j), CLASS_DRIVABLE);
                // Angle to vertical equals the ray's incidence angle here.
                let cos_alpha = f64::from(d[2]);
                assert_relative_eq!(
                    view.depth_at(i, j),
                    height / cos_alpha,
                    max_relative = 1e-6
                );
            }
        }
    }

    #[test]
    fn skyward_rays_are_background_infinity() {
        let scene = gen_scene(1, &SceneGenConfig::default()).unwrap();
        let rig = default_rig();
        let lut = build_lut(&rig[0].intrinsics, 4).unwrap();
        let view = render_view(&scene, &rig[0].extrinsics, &lut);
        let rotation = rig[0].extrinsics.rotation();
        let mut saw_sky = false;
        for i in 0..lut.height() {
            for j in 0..lut.width() {
                let Some(d) = lut.direction(i, j) else { continue };
                let world = rotation * Vector3::new(f64::from(d[0]), f64::from(d[1]), f64::from(d[2]));
                if world.z >= 0.0 && view.depth_at(i, j).is_infinite() {
                    assert_eq!(view.semantic_at(i, j), CLASS_BACKGROUND);
                    saw_sky = true;
                }
            }
        }
        assert!(saw_sky, "a 190-degree pitched-down lens still sees sky");
    }

    #[test]
    fn box_on_optical_axis_hits_at_face_range() {
        let scene = Scene {
            drivable_polygon: vec![
                Vector2::new(-50.0, -50.0),
                Vector2::new(50.0, -50.0),
                Vector2::new(50.0, 50.0),
                Vector2::new(-50.0, 50.0),
            ],
            boxes: vec![BoxObstacle {
                center: Vector3::new(6.0, 0.0, 1.0),
                size: Vector3::new(2.0, 3.0, 2.0),
                yaw: 0.0,
                class_id: CLASS_VEHICLE,
            }],
            seed: 0,
        };
        // Level camera at the box center height, optical axis along +x.
        let rot = rig_rotation(0.0, 0.0);
        let ext = CameraExtrinsics::new(rot, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let intr = FisheyeIntrinsics::equidistant(20.0, [16.0, 16.0], (32, 32), 1.5).unwrap();
        let lut = build_lut(&intr, 1).unwrap();
        let view = render_view(&scene, &ext, &lut);
        // Principal point is between entries 15 and 16; entry (15, 15) is
        // half a pixel off-axis, still hitting the front face.
        let range = view.depth_at(15, 15);
        assert_eq!(view.semantic_at(15, 15), CLASS_VEHICLE);
        // distance to center 6.0 minus half depth 1.0, off-axis correction < 1e-3
        assert_relative_eq!(range, 5.0, max_relative = 1e-3);
    }

    #[test]
    fn renderer_and_projector_agree() {
        // Every finite hit reprojects to its pixel center.
        let scene = gen_scene(11, &SceneGenConfig::default()).unwrap();
        let rig = default_rig();
        for cam in &rig {
            let lut = build_lut(&cam.intrinsics, 4).unwrap();
            let view = render_view(&scene, &cam.extrinsics, &lut);
            let rot = cam.extrinsics.rotation();
            let pos = cam.extrinsics.position();
            for i in 0..lut.height() {
                for j in 0..lut.width() {
                    let Some(d) = lut.direction(i, j) else { continue };
                    let range = view.depth_at(i, j);
                    if !range.is_finite() {
                        continue;
                    }
                    let dir =
                        rot * Vector3::new(f64::from(d[0]), f64::from(d[1]), f64::from(d[2]));
                    let world = pos + dir * range;
                    let cam_frame = rot.transpose() * (world - pos);
                    let pix = crate::camera::project_point(&cam_frame, &cam.intrinsics).unwrap();
                    let center = lut.sample_center(i, j);
                    let err = ((pix.u - center.u).powi(2) + (pix.v - center.v).powi(2)).sqrt();
                    assert!(err < 0.75, "{}: ({i},{j}) reprojects {err} px off", cam.name);
                }
            }
        }
    }

    #[test]
    fn gt_covers_grid_with_expected_classes() {
        let cfg = SceneGenConfig::default();
        let scene = gen_scene(5, &cfg).unwrap();
        let grid = BevGridSpec::default_grid(NUM_CLASSES);
        let labels = rasterize_gt_bev(&scene, &grid).unwrap();
        let mut counts = [0usize; 3];
        for cell in 0..labels.cell_count() {
            counts[labels.class_id_at(cell) as usize] += 1;
        }
        // The default pad extends past the grid, so no background cells.
        assert_eq!(counts[CLASS_BACKGROUND as usize], 0);
        assert!(counts[CLASS_VEHICLE as usize] > 0);
        assert!(counts[CLASS_DRIVABLE as usize] > counts[CLASS_VEHICLE as usize]);
    }

    #[test]
    fn covering_polygon_with_no_boxes_is_all_drivable() {
        let scene = Scene {
            drivable_polygon: vec![
                Vector2::new(-20.0, -20.0),
                Vector2::new(20.0, -20.0),
                Vector2::new(20.0, 20.0),
                Vector2::new(-20.0, 20.0),
            ],
            boxes: vec![],
            seed: 0,
        };
        let grid = BevGridSpec::default_grid(NUM_CLASSES);
        let labels = rasterize_gt_bev(&scene, &grid).unwrap();
        assert!(labels
            .class_ids()
            .iter()
            .all(|&c| c == CLASS_DRIVABLE));
    }

    #[test]
    fn axis_aligned_box_footprint_cell_count() {
        // 4 m x 2 m box at the origin on the 0.375 m grid: area ratio
        // says about 57 cells, boundary sampling allows 50..60.
        let scene = Scene {
            drivable_polygon: vec![
                Vector2::new(-14.0, -7.5),
                Vector2::new(14.0, -7.5),
                Vector2::new(14.0, 7.5),
                Vector2::new(-14.0, 7.5),
            ],
            boxes: vec![BoxObstacle {
                center: Vector3::new(0.0, 0.0, 0.3),
                size: Vector3::new(4.0, 2.0, 0.6),
                yaw: 0.0,
                class_id: CLASS_VEHICLE,
            }],
            seed: 0,
        };
        let grid = BevGridSpec::default_grid(NUM_CLASSES);
        let labels = rasterize_gt_bev(&scene, &grid).unwrap();
        let vehicle_cells = labels
            .class_ids()
            .iter()
            .filter(|&&c| c == CLASS_VEHICLE)
            .count();
        assert!(
            (50..=60).contains(&vehicle_cells),
            "vehicle cells {vehicle_cells}"
        );
    }

    #[test]
    fn rotating_a_box_by_quarter_turn_swaps_footprint_extents() {
        let make = |yaw: f64| Scene {
            drivable_polygon: vec![
                Vector2::new(-14.0, -7.5),
                Vector2::new(14.0, -7.5),
                Vector2::new(14.0, 7.5),
                Vector2::new(-14.0, 7.5),
            ],
            boxes: vec![BoxObstacle {
                center: Vector3::new(0.0, 0.0, 0.3),
                size: Vector3::new(3.0, 1.5, 0.6),
                yaw,
                class_id: CLASS_VEHICLE,
            }],
            seed: 0,
        };
        let grid = BevGridSpec::default_grid(NUM_CLASSES);
        let base = rasterize_gt_bev(&make(0.0), &grid).unwrap();
        let turned = rasterize_gt_bev(&make(std::f64::consts::FRAC_PI_2), &grid).unwrap();
        // The grid is 64x48 so a coordinate swap does not map cell-to-cell;
        // compare footprint extents instead.
        let extents = |labels: &BevLabels| {
            let mut min_i = usize::MAX;
            let mut max_i = 0;
            let mut min_j = usize::MAX;
            let mut max_j = 0;
            for i in 0..grid.rows() {
                for j in 0..grid.cols() {
                    if labels.class_id_at(i * grid.cols() + j) == CLASS_VEHICLE {
                        min_i = min_i.min(i);
                        max_i = max_i.max(i);
                        min_j = min_j.min(j);
                        max_j = max_j.max(j);
                    }
                }
            }
            (max_i - min_i + 1, max_j - min_j + 1)
        };
        let (rows_a, cols_a) = extents(&base);
        let (rows_b, cols_b) = extents(&turned);
        assert_eq!(rows_a, cols_b);
        assert_eq!(cols_a, rows_b);
    }

    #[test]
    fn oracle_inputs_bin_arithmetic() {
        let bins = DepthBinSpec::default_64();
        let view = RenderedView {
            width: 3,
            height: 1,
            semantic: vec![CLASS_DRIVABLE, CLASS_VEHICLE, CLASS_BACKGROUND],
            depth: vec![5.0, 0.4, f64::INFINITY],
        };
        let oracle = make_oracle_inputs(&view, &bins, 0.15);
        // floor((5 - 1) / 0.453125) = 8.
        assert_eq!(oracle.depth.field().pixel(0, 0)[8], 1.0);
        // Below z_min clamps to bin 0.
        assert_eq!(oracle.depth.field().pixel(0, 1)[0], 1.0);
        // +inf excluded: all-zero row, no feature.
        assert!(oracle.depth.field().pixel(0, 2).iter().all(|&p| p == 0.0));
        assert!(oracle.features.pixel(0, 2).iter().all(|&f| f == 0.0));
        assert_eq!(oracle.features.pixel(0, 0)[CLASS_DRIVABLE as usize], 1.0);
        assert_eq!(oracle.features.pixel(0, 1)[CLASS_VEHICLE as usize], 1.0);
    }

    #[test]
    fn scene_text_round_trip() {
        let scene = gen_scene(42, &SceneGenConfig::default()).unwrap();
        let text = write_scene(&scene);
        let back = parse_scene(&text).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn scene_parser_rejects_unknown_key_with_line() {
        let text = "seed 1\npolygon 0 0 1 0 1 1\nwall 1 2\n";
        match parse_scene(text).unwrap_err() {
            SynthError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("wall"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn default_rig_is_valid_and_covers_360() {
        let rig = default_rig();
        assert_eq!(rig.len(), 4);
        // Optical axes point outward along +x, -x, +y, -y (pitched down).
        let axes: Vec<Vector3<f64>> = rig
            .iter()
            .map(|c| c.extrinsics.rotation() * Vector3::new(0.0, 0.0, 1.0))
            .collect();
        assert!(axes[0].x > 0.9);
        assert!(axes[1].x < -0.9);
        assert!(axes[2].y > 0.9);
        assert!(axes[3].y < -0.9);
        for a in &axes {
            assert_relative_eq!(a.z, -(20.0_f64.to_radians().sin()), epsilon = 1e-12);
        }
    }
}
