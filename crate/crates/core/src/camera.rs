//! Fisheye camera geometry.
//!
//! The projection model maps a camera-frame point through an incidence
//! angle `theta = atan2(sqrt(x^2 + y^2), z)` and an odd radial polynomial
//! `r(theta) = f * theta + sum_i k_i * theta^(2i+1)` to a distorted pixel
//! around the principal point. The inverse direction (pixel to unit ray)
//! has no closed form; it is recovered with a Newton iteration on the
//! radial polynomial, falling back to bisection when a step leaves the
//! valid bracket. Wide lenses (FOV beyond 180 degrees) are supported: the
//! two-argument arctangent keeps `theta` well defined for points behind
//! the image plane, and `theta_max` decides what the lens accepts.
//!
//! A calibration file is plain key-value text, one block per camera; see
//! [`parse_calibration`] for the schema.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Number of samples used to check that `r(theta)` is strictly increasing.
const MONOTONICITY_SAMPLES: usize = 1024;

/// Newton tolerance on theta when inverting the radial polynomial, radians.
const INVERT_TOL: f64 = 1e-12;

/// Iteration cap for the polynomial inversion before reporting failure.
const INVERT_MAX_ITER: usize = 50;

#[derive(Debug, Error)]
pub enum CameraGeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point at incidence angle {theta} rad is outside the field of view (theta_max {theta_max})")]
    OutOfFov { theta: f64, theta_max: f64 },
    #[error("pixel radius {radius} exceeds the image circle radius {max_radius}")]
    PixelOutOfFov { radius: f64, max_radius: f64 },
    #[error("polynomial inversion did not converge after {iterations} iterations (residual {residual})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("calibration parse error at line {line}: {message}")]
    CalibrationParse { line: usize, message: String },
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

/// A distorted image coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

impl fmt::Display for PixelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

/// Intrinsic parameters of a radially distorted fisheye camera.
///
/// `focal` is in pixels per radian; `distortion` holds the polynomial
/// coefficients `k_1..k_n` of the odd radial terms, also in pixel units.
/// Construction validates that the radial polynomial is strictly
/// increasing over `[0, theta_max]`, which the inverse projection relies
/// on for its bisection bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeIntrinsics {
    focal: f64,
    principal_point: Vector2<f64>,
    distortion: Vec<f64>,
    image_size: (u32, u32),
    theta_max: f64,
}

impl FisheyeIntrinsics {
    pub fn new(
        focal: f64,
        principal_point: [f64; 2],
        distortion: Vec<f64>,
        image_size: (u32, u32),
        theta_max: f64,
    ) -> Result<Self, CameraGeometryError> {
        let bad = |msg: String| Err(CameraGeometryError::InvalidIntrinsics(msg));
        if !focal.is_finite() || focal <= 0.0 {
            return bad(format!("focal must be positive and finite, got {focal}"));
        }
        if !principal_point.iter().all(|c| c.is_finite()) {
            return bad(format!("principal point must be finite, got {principal_point:?}"));
        }
        if distortion.iter().any(|k| !k.is_finite()) {
            return bad("distortion coefficients must be finite".to_string());
        }
        if image_size.0 < 1 || image_size.1 < 1 {
            return bad(format!("image size components must be >= 1, got {image_size:?}"));
        }
        let theta_ok = theta_max > 0.0 && theta_max <= std::f64::consts::PI;
        if !theta_ok {
            return bad(format!("theta_max must lie in (0, pi], got {theta_max}"));
        }
        let intr = Self {
            focal,
            principal_point: Vector2::new(principal_point[0], principal_point[1]),
            distortion,
            image_size,
            theta_max,
        };
        // Strict monotonicity of r(theta), sampled: the inverse projection
        // depends on it for the Newton bracket and the FOV radius test.
        for i in 0..MONOTONICITY_SAMPLES {
            let theta = theta_max * (i as f64 + 0.5) / MONOTONICITY_SAMPLES as f64;
            if intr.radial_derivative(theta) <= 0.0 {
                return bad(format!(
                    "radial polynomial is not strictly increasing at theta = {theta}"
                ));
            }
        }
        Ok(intr)
    }

    /// Equidistant model (`r = f * theta`) with all distortion terms zero.
    pub fn equidistant(
        focal: f64,
        principal_point: [f64; 2],
        image_size: (u32, u32),
        theta_max: f64,
    ) -> Result<Self, CameraGeometryError> {
        Self::new(focal, principal_point, vec![0.0; 4], image_size, theta_max)
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal_point(&self) -> [f64; 2] {
        [self.principal_point.x, self.principal_point.y]
    }

    pub fn distortion(&self) -> &[f64] {
        &self.distortion
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Radial image distance `r(theta) = f*theta + sum_i k_i theta^(2i+1)`.
    pub fn radial_distance(&self, theta: f64) -> f64 {
        let theta_sq = theta * theta;
        let mut r = self.focal * theta;
        let mut odd_power = theta * theta_sq; // theta^3
        for &k in &self.distortion {
            r += k * odd_power;
            odd_power *= theta_sq;
        }
        r
    }

    /// Derivative `r'(theta) = f + sum_i (2i+1) k_i theta^(2i)`.
    pub fn radial_derivative(&self, theta: f64) -> f64 {
        let theta_sq = theta * theta;
        let mut d = self.focal;
        let mut even_power = theta_sq; // theta^2
        let mut order = 3.0;
        for &k in &self.distortion {
            d += order * k * even_power;
            even_power *= theta_sq;
            order += 2.0;
        }
        d
    }

    /// Radius of the valid image circle, `r(theta_max)`.
    pub fn max_radius(&self) -> f64 {
        self.radial_distance(self.theta_max)
    }

    /// Inverts the radial polynomial: finds `theta` with `r(theta) = radius`.
    ///
    /// Newton from the equidistant initial guess `radius / f`, with a
    /// bisection fallback whenever a step leaves the current bracket
    /// inside `[0, theta_max]`. Converges when the theta update drops
    /// below 1e-12 rad; non-convergence is reported, never silently
    /// returned.
    pub fn invert_radial(&self, radius: f64) -> Result<f64, CameraGeometryError> {
        if radius == 0.0 {
            return Ok(0.0);
        }
        let max_radius = self.max_radius();
        if radius.is_nan() || radius < 0.0 || radius > max_radius {
            return Err(CameraGeometryError::PixelOutOfFov { radius, max_radius });
        }
        // Bracket invariant (monotone r): r(lo) <= radius <= r(hi).
        let mut lo = 0.0_f64;
        let mut hi = self.theta_max;
        let mut theta = (radius / self.focal).clamp(lo, hi);
        for _ in 0..INVERT_MAX_ITER {
            let residual = self.radial_distance(theta) - radius;
            if residual > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let mut next = theta - residual / self.radial_derivative(theta);
            if !(next >= lo && next <= hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - theta).abs() <= INVERT_TOL {
                return Ok(next);
            }
            theta = next;
        }
        Err(CameraGeometryError::NonConvergence {
            iterations: INVERT_MAX_ITER,
            residual: self.radial_distance(theta) - radius,
        })
    }
}

/// Rigid camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    /// Validates orthonormality (`R^T R = I` to 1e-9) and `det R = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraGeometryError> {
        if rotation.iter().any(|x| !x.is_finite()) || translation.iter().any(|x| !x.is_finite()) {
            return Err(CameraGeometryError::InvalidExtrinsics(
                "rotation and translation must be finite".to_string(),
            ));
        }
        let gram = rotation.transpose() * rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        if deviation > 1e-9 {
            return Err(CameraGeometryError::InvalidExtrinsics(format!(
                "rotation is not orthonormal (max deviation {deviation:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(CameraGeometryError::InvalidExtrinsics(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera position in the world frame (equals the translation).
    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }
}

/// A named camera: intrinsics plus pose.
#[derive(Debug, Clone)]
pub struct FisheyeCamera {
    pub name: String,
    pub intrinsics: FisheyeIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

/// Incidence angle between a camera-frame point and the optical axis.
///
/// Uses `atan2(sqrt(x^2 + y^2), z)` so that points behind the image plane
/// (`z <= 0`) map to angles at or beyond a right angle instead of being
/// undefined; a lens with FOV over 180 degrees accepts some of them.
pub fn incidence_angle(point: &Vector3<f64>) -> Result<f64, CameraGeometryError> {
    let rho = point.xy().norm();
    if rho == 0.0 && point.z == 0.0 {
        return Err(CameraGeometryError::DegenerateInput(
            "cannot take the incidence angle of the origin".to_string(),
        ));
    }
    Ok(rho.atan2(point.z))
}

/// Projects a camera-frame point to a distorted pixel.
///
/// On the optical axis (`x = y = 0`) the radial direction is undefined but
/// annihilated by `r(0) = 0`, so the principal point is returned exactly.
pub fn project_point(
    point: &Vector3<f64>,
    intr: &FisheyeIntrinsics,
) -> Result<PixelCoord, CameraGeometryError> {
    let theta = incidence_angle(point)?;
    if theta > intr.theta_max {
        return Err(CameraGeometryError::OutOfFov {
            theta,
            theta_max: intr.theta_max,
        });
    }
    let rho = point.xy().norm();
    if rho == 0.0 {
        return Ok(PixelCoord::new(intr.principal_point.x, intr.principal_point.y));
    }
    let r = intr.radial_distance(theta);
    Ok(PixelCoord::new(
        intr.principal_point.x + r * point.x / rho,
        intr.principal_point.y + r * point.y / rho,
    ))
}

/// Recovers the unit camera-frame ray through a pixel.
///
/// The returned direction `d` satisfies `project_point(d) = pixel` to
/// within the inversion tolerance, with `d.z = cos(theta)` and the `x, y`
/// components along the pixel's radial azimuth. The principal point maps
/// to `(0, 0, 1)`.
pub fn unproject_pixel(
    pixel: &PixelCoord,
    intr: &FisheyeIntrinsics,
) -> Result<Vector3<f64>, CameraGeometryError> {
    if !pixel.u.is_finite() || !pixel.v.is_finite() {
        return Err(CameraGeometryError::DegenerateInput(format!(
            "pixel coordinates must be finite, got {pixel}"
        )));
    }
    let offset = Vector2::new(pixel.u, pixel.v) - intr.principal_point;
    let radius = offset.norm();
    if radius == 0.0 {
        return Ok(Vector3::new(0.0, 0.0, 1.0));
    }
    let theta = intr.invert_radial(radius)?;
    let (sin_theta, cos_theta) = theta.sin_cos();
    Ok(Vector3::new(
        sin_theta * offset.x / radius,
        sin_theta * offset.y / radius,
        cos_theta,
    ))
}

/// Applies the rigid camera-to-world transform `R * p + t`.
pub fn camera_to_world(point_cam: &Vector3<f64>, ext: &CameraExtrinsics) -> Vector3<f64> {
    ext.rotation * point_cam + ext.translation
}

/// Transforms a camera-frame direction to the world frame (rotation only).
pub fn direction_to_world(dir_cam: &Vector3<f64>, ext: &CameraExtrinsics) -> Vector3<f64> {
    ext.rotation * dir_cam
}

// ---------------------------------------------------------------------------
// Calibration file
// ---------------------------------------------------------------------------

/// Parses a plain-text calibration file.
///
/// One block per camera, `#` starts a comment, keys are:
///
/// ```text
/// camera <name>
/// image_size <width> <height>
/// focal <pixels-per-radian>
/// principal_point <cx> <cy>
/// distortion <k1> <k2> ... (any count, including empty)
/// theta_max_deg <degrees>
/// rotation <r00> <r01> <r02> <r10> ... <r22>   # camera-to-world, row-major
/// translation <tx> <ty> <tz>                   # meters
/// end
/// ```
///
/// Every key except `distortion` is mandatory within a block; unknown keys
/// are rejected with the offending line number.
pub fn parse_calibration(text: &str) -> Result<Vec<FisheyeCamera>, CameraGeometryError> {
    let mut cameras = Vec::new();
    let mut block: Option<CalibBlock> = None;

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
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty line has a first token");
        let args: Vec<&str> = parts.collect();
        let parse_err = |message: String| CameraGeometryError::CalibrationParse {
            line: line_no,
            message,
        };

        if key == "camera" {
            if block.is_some() {
                return Err(parse_err("nested 'camera' block (missing 'end'?)".to_string()));
            }
            if args.len() != 1 {
                return Err(parse_err("'camera' expects exactly one name".to_string()));
            }
            block = Some(CalibBlock::new(args[0].to_string()));
            continue;
        }

        let b = block
            .as_mut()
            .ok_or_else(|| parse_err(format!("key '{key}' outside a camera block")))?;

        match key {
            "image_size" => b.image_size = Some(parse_u32_pair(&args).map_err(parse_err)?),
            "focal" => b.focal = Some(parse_floats::<1>(&args).map_err(parse_err)?[0]),
            "principal_point" => {
                let v = parse_floats::<2>(&args).map_err(parse_err)?;
                b.principal_point = Some([v[0], v[1]]);
            }
            "distortion" => {
                let mut ks = Vec::with_capacity(args.len());
                for a in &args {
                    ks.push(a.parse::<f64>().map_err(|e| parse_err(format!("bad float '{a}': {e}")))?);
                }
                b.distortion = Some(ks);
            }
            "theta_max_deg" => {
                b.theta_max = Some(parse_floats::<1>(&args).map_err(parse_err)?[0].to_radians())
            }
            "rotation" => {
                let v = parse_floats::<9>(&args).map_err(parse_err)?;
                b.rotation = Some(Matrix3::from_row_slice(&v));
            }
            "translation" => {
                let v = parse_floats::<3>(&args).map_err(parse_err)?;
                b.translation = Some(Vector3::new(v[0], v[1], v[2]));
            }
            "end" => {
                let finished = block.take().expect("checked above");
                cameras.push(finished.build(line_no)?);
            }
            other => return Err(parse_err(format!("unknown key '{other}'"))),
        }
    }

    if let Some(b) = block {
        return Err(CameraGeometryError::CalibrationParse {
            line: text.lines().count(),
            message: format!("camera block '{}' missing 'end'", b.name),
        });
    }
    Ok(cameras)
}

pub fn load_calibration(path: &Path) -> Result<Vec<FisheyeCamera>, CameraGeometryError> {
    parse_calibration(&std::fs::read_to_string(path)?)
}

/// Writes cameras in the format accepted by [`parse_calibration`].
pub fn write_calibration(cameras: &[FisheyeCamera]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    for cam in cameras {
        let intr = &cam.intrinsics;
        let (w, h) = intr.image_size();
        writeln!(out, "camera {}", cam.name).unwrap();
        writeln!(out, "image_size {w} {h}").unwrap();
        writeln!(out, "focal {:?}", intr.focal()).unwrap();
        let pp = intr.principal_point();
        writeln!(out, "principal_point {:?} {:?}", pp[0], pp[1]).unwrap();
        let ks: Vec<String> = intr.distortion().iter().map(|k| format!("{k:?}")).collect();
        writeln!(out, "distortion {}", ks.join(" ")).unwrap();
        writeln!(out, "theta_max_deg {:?}", intr.theta_max().to_degrees()).unwrap();
        let r = cam.extrinsics.rotation();
        let rv: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| format!("{:?}", r[(i, j)]))
            .collect();
        writeln!(out, "rotation {}", rv.join(" ")).unwrap();
        let t = cam.extrinsics.translation();
        writeln!(out, "translation {:?} {:?} {:?}", t.x, t.y, t.z).unwrap();
        writeln!(out, "end").unwrap();
    }
    out
}

struct CalibBlock {
    name: String,
    image_size: Option<(u32, u32)>,
    focal: Option<f64>,
    principal_point: Option<[f64; 2]>,
    distortion: Option<Vec<f64>>,
    theta_max: Option<f64>,
    rotation: Option<Matrix3<f64>>,
    translation: Option<Vector3<f64>>,
}

impl CalibBlock {
    fn new(name: String) -> Self {
        Self {
            name,
            image_size: None,
            focal: None,
            principal_point: None,
            distortion: None,
            theta_max: None,
            rotation: None,
            translation: None,
        }
    }

    fn build(self, line: usize) -> Result<FisheyeCamera, CameraGeometryError> {
        let missing = |what: &str| CameraGeometryError::CalibrationParse {
            line,
            message: format!("camera '{}' is missing '{what}'", self.name),
        };
        let intrinsics = FisheyeIntrinsics::new(
            self.focal.ok_or_else(|| missing("focal"))?,
            self.principal_point.ok_or_else(|| missing("principal_point"))?,
            self.distortion.unwrap_or_else(|| vec![0.0; 4]),
            self.image_size.ok_or_else(|| missing("image_size"))?,
            self.theta_max.ok_or_else(|| missing("theta_max_deg"))?,
        )?;
        let extrinsics = CameraExtrinsics::new(
            self.rotation.ok_or_else(|| missing("rotation"))?,
            self.translation.ok_or_else(|| missing("translation"))?,
        )?;
        Ok(FisheyeCamera {
            name: self.name,
            intrinsics,
            extrinsics,
        })
    }
}

fn parse_u32_pair(args: &[&str]) -> Result<(u32, u32), String> {
    if args.len() != 2 {
        return Err(format!("expected 2 integers, got {}", args.len()));
    }
    let w = args[0].parse::<u32>().map_err(|e| format!("bad integer '{}': {e}", args[0]))?;
    let h = args[1].parse::<u32>().map_err(|e| format!("bad integer '{}': {e}", args[1]))?;
    Ok((w, h))
}

fn parse_floats<const N: usize>(args: &[&str]) -> Result<[f64; N], String> {
    if args.len() != N {
        return Err(format!("expected {N} values, got {}", args.len()));
    }
    let mut out = [0.0; N];
    for (slot, a) in out.iter_mut().zip(args) {
        *slot = a.parse::<f64>().map_err(|e| format!("bad float '{a}': {e}"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn plain_intrinsics(focal: f64, cx: f64, cy: f64, k: Vec<f64>) -> FisheyeIntrinsics {
        FisheyeIntrinsics::new(focal, [cx, cy], k, (1024, 864), 95.0_f64.to_radians()).unwrap()
    }

    #[test]
    fn incidence_angle_on_axis_is_zero() {
        let theta = incidence_angle(&Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(theta, 0.0);
    }

    #[test]
    fn incidence_angle_diagonal_is_quarter_pi() {
        let theta = incidence_angle(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(theta, FRAC_PI_4, max_relative = 1e-15);
    }

    #[test]
    fn incidence_angle_three_four_five() {
        // sqrt(3^2 + 4^2) = 5, atan(5/5) = pi/4, evaluated by hand.
        let theta = incidence_angle(&Vector3::new(3.0, 4.0, 5.0)).unwrap();
        assert_relative_eq!(theta, FRAC_PI_4, max_relative = 1e-15);
    }

    #[test]
    fn incidence_angle_behind_plane_is_obtuse() {
        let theta = incidence_angle(&Vector3::new(1.0, 0.0, -0.1)).unwrap();
        assert!(theta > FRAC_PI_2 && theta < PI);
    }

    #[test]
    fn incidence_angle_rejects_origin() {
        let err = incidence_angle(&Vector3::zeros()).unwrap_err();
        assert!(matches!(err, CameraGeometryError::DegenerateInput(_)));
    }

    #[test]
    fn project_on_axis_hits_principal_point() {
        let intr = plain_intrinsics(300.0, 512.0, 432.0, vec![0.0; 4]);
        let p = project_point(&Vector3::new(0.0, 0.0, 5.0), &intr).unwrap();
        assert_eq!(p, PixelCoord::new(512.0, 432.0));
    }

    #[test]
    fn project_equidistant_diagonal() {
        let intr = FisheyeIntrinsics::equidistant(1.0, [0.0, 0.0], (4, 4), 2.0).unwrap();
        let p = project_point(&Vector3::new(1.0, 0.0, 1.0), &intr).unwrap();
        assert_relative_eq!(p.u, FRAC_PI_4, max_relative = 1e-15);
        assert_eq!(p.v, 0.0);
    }

    #[test]
    fn project_single_cubic_term() {
        // Independent evaluation of the radial polynomial at theta = pi/4.
        let intr = FisheyeIntrinsics::new(1.0, [0.0, 0.0], vec![0.1], (4, 4), 2.0).unwrap();
        let p = project_point(&Vector3::new(1.0, 0.0, 1.0), &intr).unwrap();
        let expected = FRAC_PI_4 + 0.1 * FRAC_PI_4 * FRAC_PI_4 * FRAC_PI_4;
        assert_relative_eq!(p.u, expected, epsilon = 1e-12);
        assert_eq!(p.v, 0.0);
    }

    #[test]
    fn project_rejects_out_of_fov() {
        let intr = plain_intrinsics(40.0, 64.0, 54.0, vec![0.0; 4]);
        let err = project_point(&Vector3::new(1.0, 0.0, -1.0), &intr).unwrap_err();
        assert!(matches!(err, CameraGeometryError::OutOfFov { .. }));
    }

    #[test]
    fn unproject_principal_point_is_forward() {
        let intr = plain_intrinsics(40.0, 64.0, 54.0, vec![0.02, -0.003, 0.0, 0.0]);
        let d = unproject_pixel(&PixelCoord::new(64.0, 54.0), &intr).unwrap();
        assert_eq!(d, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn unproject_equidistant_quarter_pi() {
        let intr = FisheyeIntrinsics::equidistant(1.0, [0.0, 0.0], (4, 4), 2.0).unwrap();
        let d = unproject_pixel(&PixelCoord::new(FRAC_PI_4, 0.0), &intr).unwrap();
        assert_relative_eq!(d.x, FRAC_PI_4.sin(), epsilon = 1e-12);
        assert_relative_eq!(d.y, 0.0, epsilon = 1e-15);
        assert_relative_eq!(d.z, FRAC_PI_4.cos(), epsilon = 1e-12);
    }

    #[test]
    fn unproject_rejects_outside_image_circle() {
        let intr = plain_intrinsics(30.0, 64.0, 54.0, vec![0.0; 4]);
        let max_r = intr.max_radius();
        let err = unproject_pixel(&PixelCoord::new(64.0 + max_r + 1.0, 54.0), &intr).unwrap_err();
        assert!(matches!(err, CameraGeometryError::PixelOutOfFov { .. }));
    }

    #[test]
    fn wide_lens_accepts_points_behind_the_image_plane() {
        // 190-degree lens: theta up to 95 degrees, so z may go negative.
        let intr = plain_intrinsics(300.0, 512.0, 432.0, vec![18.0, -2.5, 0.4, 0.0]);
        let p = Vector3::new(1.0, 0.0, -0.05);
        let theta = incidence_angle(&p).unwrap();
        assert!(theta > FRAC_PI_2 && theta < intr.theta_max());
        let pix = project_point(&p, &intr).unwrap();
        let dir = unproject_pixel(&pix, &intr).unwrap();
        assert!(dir.z < 0.0);
        let back = project_point(&dir, &intr).unwrap();
        assert!(((back.u - pix.u).powi(2) + (back.v - pix.v).powi(2)).sqrt() < 1e-6);
    }

    #[test]
    fn round_trip_random_pixels() {
        // 10^4 in-FOV pixels across a distorted calibration.
        let intr = plain_intrinsics(300.0, 512.0, 432.0, vec![18.0, -2.5, 0.4, 0.0]);
        let max_r = intr.max_radius();
        let mut worst = 0.0_f64;
        let mut state = 0x9e3779b97f4a7c15_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..10_000 {
            let radius = 0.99 * max_r * next().sqrt();
            let azimuth = 2.0 * PI * next();
            let pixel = PixelCoord::new(
                512.0 + radius * azimuth.cos(),
                432.0 + radius * azimuth.sin(),
            );
            let dir = unproject_pixel(&pixel, &intr).unwrap();
            let back = project_point(&dir, &intr).unwrap();
            worst = worst.max(((back.u - pixel.u).powi(2) + (back.v - pixel.v).powi(2)).sqrt());
        }
        assert!(worst < 1e-6, "worst round-trip error {worst} px");
    }

    #[test]
    fn projection_is_scale_invariant() {
        let intr = plain_intrinsics(40.0, 64.0, 54.0, vec![0.8, -0.1, 0.0, 0.0]);
        let p = Vector3::new(0.3, -0.2, 0.9);
        let a = project_point(&p, &intr).unwrap();
        for lambda in [0.25, 3.0, 1e4] {
            let b = project_point(&(p * lambda), &intr).unwrap();
            assert_relative_eq!(a.u, b.u, epsilon = 1e-9);
            assert_relative_eq!(a.v, b.v, epsilon = 1e-9);
        }
    }

    #[test]
    fn azimuth_is_preserved() {
        let intr = plain_intrinsics(40.0, 64.0, 54.0, vec![0.8, -0.1, 0.0, 0.0]);
        let p = Vector3::new(0.3, -0.7, 0.6);
        let pix = project_point(&p, &intr).unwrap();
        let off = Vector2::new(pix.u - 64.0, pix.v - 54.0);
        let dir = Vector2::new(p.x, p.y);
        let cross = off.x * dir.y - off.y * dir.x;
        assert!(cross.abs() < 1e-9 * off.norm() * dir.norm());
        assert!(off.dot(&dir) > 0.0);
    }

    #[test]
    fn intrinsics_reject_non_monotonic_polynomial() {
        // Strong negative cubic makes r(theta) fold back inside the FOV.
        let err = FisheyeIntrinsics::new(1.0, [0.0, 0.0], vec![-0.5], (64, 64), 95.0_f64.to_radians());
        assert!(err.is_err());
    }

    #[test]
    fn extrinsics_reject_scaled_rotation() {
        let err = CameraExtrinsics::new(Matrix3::identity() * 1.000001, Vector3::zeros());
        assert!(err.is_err());
    }

    #[test]
    fn extrinsics_reject_reflection() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(CameraExtrinsics::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn camera_to_world_identity_and_translation() {
        let ext = CameraExtrinsics::identity();
        assert_eq!(
            camera_to_world(&Vector3::new(1.0, 2.0, 3.0), &ext),
            Vector3::new(1.0, 2.0, 3.0)
        );
        let ext = CameraExtrinsics::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 0.0)).unwrap();
        assert_eq!(
            camera_to_world(&Vector3::new(0.0, 0.0, 5.0), &ext),
            Vector3::new(1.0, 2.0, 5.0)
        );
    }

    #[test]
    fn camera_to_world_yaw_matches_direct_multiply() {
        let yaw = FRAC_PI_2;
        let rot = Matrix3::new(
            yaw.cos(), -yaw.sin(), 0.0,
            yaw.sin(), yaw.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let ext = CameraExtrinsics::new(rot, Vector3::zeros()).unwrap();
        let p = Vector3::new(0.0, 0.0, 5.0);
        let got = camera_to_world(&p, &ext);
        let expected = rot * p;
        assert_relative_eq!((got - expected).norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(got.z, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn camera_to_world_preserves_distances() {
        let axis = Vector3::new(0.3, -0.5, 0.81).normalize();
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), 1.1)
            .into_inner();
        let ext = CameraExtrinsics::new(rot, Vector3::new(4.0, -2.0, 0.5)).unwrap();
        let a = Vector3::new(1.0, 2.0, 3.0);
        let b = Vector3::new(-0.5, 0.25, 7.0);
        let d0 = (a - b).norm();
        let d1 = (camera_to_world(&a, &ext) - camera_to_world(&b, &ext)).norm();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn calibration_round_trips_through_text() {
        let cam = FisheyeCamera {
            name: "front".to_string(),
            intrinsics: plain_intrinsics(31.25, 64.0, 54.0, vec![0.6, -0.09, 0.0, 0.0]),
            extrinsics: CameraExtrinsics::new(Matrix3::identity(), Vector3::new(1.9, 0.0, 0.9))
                .unwrap(),
        };
        let text = write_calibration(std::slice::from_ref(&cam));
        let parsed = parse_calibration(&text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].name, "front");
        assert_eq!(parsed[0].intrinsics, cam.intrinsics);
        assert_eq!(parsed[0].extrinsics, cam.extrinsics);
    }

    #[test]
    fn calibration_rejects_unknown_key() {
        let text = "camera a\nimage_size 4 4\nfocal 1.0\nprincipal_point 2 2\n\
                    theta_max_deg 95\nskew 0.5\nrotation 1 0 0 0 1 0 0 0 1\ntranslation 0 0 0\nend\n";
        let err = parse_calibration(text).unwrap_err();
        match err {
            CameraGeometryError::CalibrationParse { line, message } => {
                assert_eq!(line, 6);
                assert!(message.contains("skew"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn calibration_rejects_missing_field() {
        let text = "camera a\nimage_size 4 4\nfocal 1.0\nprincipal_point 2 2\n\
                    rotation 1 0 0 0 1 0 0 0 1\ntranslation 0 0 0\nend\n";
        assert!(parse_calibration(text).is_err());
    }
}
