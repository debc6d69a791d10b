//! Fisheye-to-BEV geometric lifting and differentiable Gaussian splatting.
//!
//! The crate turns calibrated fisheye pixels into uncertainty-carrying 3D
//! Gaussians and rasterizes them onto a metric bird's-eye-view grid:
//!
//! * [`camera`] -- wide-FOV fisheye projection model (incidence angle, odd
//!   radial polynomial, principal point) and its numerical inverse, plus
//!   rigid camera-to-world transforms and a plain-text calibration format.
//! * [`lut`] -- precomputed per-pixel unit-ray lookup tables with a binary
//!   on-disk format.
//! * [`field`] -- dense per-pixel float fields (depth distributions, sigma
//!   maps, feature maps) with a binary on-disk format.
//! * [`lift`] -- lifting (pixel, depth bin) pairs into 3D Gaussians with
//!   composed covariances.
//! * [`splat`] -- differentiable anisotropic rasterization of ground-plane
//!   Gaussians onto a metric BEV grid, forward and analytic backward.
//! * [`train`] -- weighted cross-entropy, per-class IoU, and a toy
//!   gradient-descent loop through the full lift-splat chain.
//! * [`synth`] -- deterministic synthetic scenes, a fisheye ray-cast
//!   renderer, BEV ground-truth rasterization, and oracle inputs.

#![forbid(unsafe_code)]

pub mod camera;
pub mod field;
pub mod gradcheck;
pub mod image_io;
pub mod lift;
pub mod lut;
pub mod splat;
pub mod synth;
pub mod train;

mod binio;

pub use camera::{
    CameraExtrinsics, CameraGeometryError, FisheyeCamera, FisheyeIntrinsics, PixelCoord,
};
pub use field::PixelField;
pub use lift::{DepthBinSpec, DepthDistribution, Gaussian3};
pub use lut::RayLut;
pub use splat::{BevGridSpec, BevRaster, Gaussian2};
pub use synth::Scene;
pub use train::{BevLabels, ClassWeights, ConfusionCounts};
