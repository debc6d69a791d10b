//! Binary PGM/PPM emission and parsing.
//!
//! PGM (`P5`, maxval 255) carries class-id images: BEV label rasters and
//! rendered semantic views. PPM (`P6`) carries three-channel raster
//! previews. Raster previews are min-max scaled per channel; the scaling
//! is written to a sidecar text file so the images stay invertible.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::splat::BevRaster;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pnm parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unsupported pnm format: {0}")]
    Unsupported(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
        }
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), ImageError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(img))?;
    Ok(())
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ImageError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_ppm(width, height, rgb))?;
    Ok(())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0usize;
    let magic = take_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(ImageError::Unsupported(format!(
            "expected P5, found {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = parse_number(bytes, &mut pos)?;
    let height = parse_number(bytes, &mut pos)?;
    let maxval = parse_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            message: format!("payload truncated, need {need} bytes"),
        });
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, ImageError> {
    decode_pgm(&std::fs::read(path)?)
}

fn take_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>, ImageError> {
    skip_whitespace_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Parse {
            offset: start,
            message: "expected a token".to_string(),
        });
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_number(bytes: &[u8], pos: &mut usize) -> Result<usize, ImageError> {
    let tok = take_token(bytes, pos)?;
    let at = *pos;
    String::from_utf8_lossy(&tok)
        .parse::<usize>()
        .map_err(|e| ImageError::Parse {
            offset: at,
            message: format!("bad number: {e}"),
        })
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            return;
        }
    }
}

/// Written files of a raster preview: images plus the scaling sidecar.
#[derive(Debug, Clone)]
pub struct PreviewFiles {
    pub images: Vec<PathBuf>,
    pub sidecar: PathBuf,
}

/// Emits min-max scaled 8-bit previews of a raster.
///
/// Three-channel rasters become one PPM; other channel counts get one PGM
/// per channel. The mass plane always gets its own PGM. Per-channel
/// `min`/`max` used for scaling go to `<prefix>_scale.txt`.
pub fn write_raster_preview(raster: &BevRaster, prefix: &Path) -> Result<PreviewFiles, ImageError> {
    let spec = raster.spec();
    let (rows, cols, channels) = (spec.rows(), spec.cols(), spec.channels());
    let mut scales = Vec::with_capacity(channels + 1);
    let mut planes: Vec<Vec<u8>> = Vec::with_capacity(channels);
    for k in 0..channels {
        let values: Vec<f64> = (0..rows * cols)
            .map(|cell| raster.features()[cell * channels + k])
            .collect();
        let (plane, lo, hi) = scale_to_bytes(&values);
        scales.push((format!("channel_{k}"), lo, hi));
        planes.push(plane);
    }
    let (mass_plane, mass_lo, mass_hi) = scale_to_bytes(raster.mass());
    scales.push(("mass".to_string(), mass_lo, mass_hi));

    let stem = prefix.to_string_lossy();
    let mut images = Vec::new();
    if channels == 3 {
        let mut rgb = vec![0u8; rows * cols * 3];
        for cell in 0..rows * cols {
            for k in 0..3 {
                rgb[cell * 3 + k] = planes[k][cell];
            }
        }
        let path = PathBuf::from(format!("{stem}_features.ppm"));
        write_ppm(&path, cols, rows, &rgb)?;
        images.push(path);
    } else {
        for (k, plane) in planes.iter().enumerate() {
            let path = PathBuf::from(format!("{stem}_c{k}.pgm"));
            write_pgm(&path, &GrayImage::new(cols, rows, plane.clone()))?;
            images.push(path);
        }
    }
    let mass_path = PathBuf::from(format!("{stem}_mass.pgm"));
    write_pgm(&mass_path, &GrayImage::new(cols, rows, mass_plane))?;
    images.push(mass_path);

    let sidecar = PathBuf::from(format!("{stem}_scale.txt"));
    let mut text = String::from("# plane min max\n");
    for (name, lo, hi) in &scales {
        text.push_str(&format!("{name} {lo:?} {hi:?}\n"));
    }
    std::fs::write(&sidecar, text)?;
    Ok(PreviewFiles { images, sidecar })
}

fn scale_to_bytes(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes = values
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    (bytes, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_with_comment_parses() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x07\x09".to_vec();
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn pgm_rejects_wrong_magic() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn pgm_rejects_truncated_payload() {
        let bytes = b"P5\n4 4\n255\n\x00\x00".to_vec();
        assert!(decode_pgm(&bytes).is_err());
    }
}
