//! Dense per-pixel float fields.
//!
//! A [`PixelField`] carries `channels` scalars per pixel in row-major
//! channel-last order. It backs depth distributions, sigma maps, feature
//! maps, and free training parameters. Values are kept in f64 for the
//! differentiable pipeline; the on-disk "FPFD" format stores float32.
//!
//! FPFD layout (little-endian): magic `FPFD`, version u32 = 1, width u32,
//! height u32, channels u32, then `width * height * channels` float32
//! values row-major channel-last.

use std::io::Write;
use std::path::Path;

pub use crate::binio::FormatError;
use crate::binio::{self, OffsetReader};

const MAGIC: [u8; 4] = *b"FPFD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelField {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PixelField {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "payload size mismatch");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Constant-valued single-channel field.
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The channel vector of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.width + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn same_shape(&self, other: &PixelField) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        binio::write_u32(&mut out, VERSION).unwrap();
        binio::write_u32(&mut out, self.width as u32).unwrap();
        binio::write_u32(&mut out, self.height as u32).unwrap();
        binio::write_u32(&mut out, self.channels as u32).unwrap();
        let f32s: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        binio::write_f32_slice(&mut out, &f32s).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = OffsetReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let channels = r.u32("channels")? as usize;
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or(FormatError::InvalidField {
                offset: 8,
                context: "field dimensions overflow".to_string(),
            })?;
        let payload = r.f32_vec(count, "float payload")?;
        r.expect_eof()?;
        Ok(Self {
            width,
            height,
            channels,
            data: payload.into_iter().map(f64::from).collect(),
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
