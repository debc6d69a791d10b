//! Per-pixel unit-ray lookup tables.
//!
//! A [`RayLut`] inverts the fisheye model once, offline: entry `(i, j)` is
//! the unit camera-frame direction through the pixel center
//! `((j + 0.5) * stride, (i + 0.5) * stride)` of the source image.
//! Out-of-FOV pixels are marked invalid and their direction is exactly
//! `(0, 0, 0)`; validity lives in a separate bitmap so the float payload
//! stays clean for vectorized consumers.
//!
//! Rows are computed in parallel but written to pre-assigned slots, so the
//! result is a pure function of `(intrinsics, stride)` and byte-identical
//! across runs and thread counts.
//!
//! FLUT layout (little-endian): magic `FLUT`, version u32 = 1, width u32,
//! height u32, stride u32, then `width * height * 3` float32 directions
//! row-major, then `ceil(width * height / 8)` validity bytes (bit `k` of
//! byte `k / 8` is pixel `k` in row-major order, LSB first; padding bits
//! are zero).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

pub use crate::binio::FormatError;
use crate::binio::{self, OffsetReader};
use crate::camera::{unproject_pixel, CameraGeometryError, FisheyeIntrinsics, PixelCoord};

const MAGIC: [u8; 4] = *b"FLUT";
const VERSION: u32 = 1;

/// Precomputed per-pixel unit rays in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RayLut {
    width: usize,
    height: usize,
    stride: u32,
    /// 3 floats per entry, row-major; exactly zero for invalid entries.
    directions: Vec<f32>,
    /// One bit per entry, row-major, LSB first.
    valid: Vec<u8>,
}

impl RayLut {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        let bit = row * self.width + col;
        self.valid[bit / 8] >> (bit % 8) & 1 == 1
    }

    /// Direction through entry `(row, col)`, or `None` for invalid entries.
    pub fn direction(&self, row: usize, col: usize) -> Option<[f32; 3]> {
        if !self.is_valid(row, col) {
            return None;
        }
        let base = (row * self.width + col) * 3;
        Some([
            self.directions[base],
            self.directions[base + 1],
            self.directions[base + 2],
        ])
    }

    pub fn directions(&self) -> &[f32] {
        &self.directions
    }

    pub fn valid_bitmap(&self) -> &[u8] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        (0..self.width * self.height)
            .filter(|&bit| self.valid[bit / 8] >> (bit % 8) & 1 == 1)
            .count()
    }

    /// Source-image coordinate of the pixel center sampled by entry `(row, col)`.
    pub fn sample_center(&self, row: usize, col: usize) -> PixelCoord {
        let s = f64::from(self.stride);
        PixelCoord::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        binio::write_u32(&mut out, VERSION).unwrap();
        binio::write_u32(&mut out, self.width as u32).unwrap();
        binio::write_u32(&mut out, self.height as u32).unwrap();
        binio::write_u32(&mut out, self.stride).unwrap();
        binio::write_f32_slice(&mut out, &self.directions).unwrap();
        out.extend_from_slice(&self.valid);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = OffsetReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let stride = r.u32("stride")?;
        if stride == 0 {
            return Err(FormatError::InvalidField {
                offset: 16,
                context: "stride must be >= 1".to_string(),
            });
        }
        let pixels = width.checked_mul(height).ok_or(FormatError::InvalidField {
            offset: 8,
            context: "LUT dimensions overflow".to_string(),
        })?;
        let directions = r.f32_vec(pixels * 3, "direction payload")?;
        let valid = r.bytes(pixels.div_ceil(8), "validity bitmap")?;
        r.expect_eof()?;
        Ok(Self {
            width,
            height,
            stride,
            directions,
            valid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Builds the ray LUT for `intr`, subsampled by `stride`.
///
/// LUT dimensions are `ceil(image_size / stride)`. Entry `(i, j)` holds the
/// unit ray through source pixel center `((j + 0.5) * stride, (i + 0.5) * stride)`,
/// or zeros with a cleared validity bit when that center is outside the
/// image circle.
pub fn build_lut(intr: &FisheyeIntrinsics, stride: u32) -> Result<RayLut, CameraGeometryError> {
    assert!(stride >= 1, "stride must be >= 1");
    let (img_w, img_h) = intr.image_size();
    let width = (img_w as usize).div_ceil(stride as usize);
    let height = (img_h as usize).div_ceil(stride as usize);

    let mut directions = vec![0.0_f32; width * height * 3];
    let mut row_valid = vec![0_u8; width * height];

    directions
        .par_chunks_exact_mut(width * 3)
        .zip(row_valid.par_chunks_exact_mut(width))
        .enumerate()
        .for_each(|(i, (dir_row, valid_row))| {
            let v = (i as f64 + 0.5) * f64::from(stride);
            for j in 0..width {
                let u = (j as f64 + 0.5) * f64::from(stride);
                match unproject_pixel(&PixelCoord::new(u, v), intr) {
                    Ok(d) => {
                        dir_row[j * 3] = d.x as f32;
                        dir_row[j * 3 + 1] = d.y as f32;
                        dir_row[j * 3 + 2] = d.z as f32;
                        valid_row[j] = 1;
                    }
                    Err(CameraGeometryError::PixelOutOfFov { .. }) => {}
                    // Any other failure means the intrinsics slipped past
                    // validation; surface it loudly rather than masking.
                    Err(e) => panic!("LUT build failed at ({u}, {v}): {e}"),
                }
            }
        });

    let mut valid = vec![0_u8; (width * height).div_ceil(8)];
    for (bit, &flag) in row_valid.iter().enumerate() {
        if flag == 1 {
            valid[bit / 8] |= 1 << (bit % 8);
        }
    }

    Ok(RayLut {
        width,
        height,
        stride,
        directions,
        valid,
    })
}
