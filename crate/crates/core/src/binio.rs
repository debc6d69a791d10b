//! Little-endian binary readers/writers shared by the on-disk formats.
//!
//! Readers track the absolute byte offset so that format errors can point at
//! the exact position in the file.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    BadVersion { offset: u64, expected: u32, found: u32 },
    #[error("truncated file at byte {offset}: {context}")]
    Truncated { offset: u64, context: &'static str },
    #[error("invalid header field at byte {offset}: {context}")]
    InvalidField { offset: u64, context: String },
    #[error("trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: u64 },
    #[error("i/o error")]
    Io(#[from] io::Error),
}

/// Reader wrapper that keeps the running byte offset for error reporting.
pub struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], context: &'static str) -> Result<(), FormatError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(FormatError::Truncated {
                offset: self.offset,
                context,
            }),
            Err(e) => Err(FormatError::Io(e)),
        }
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let at = self.offset;
        let mut found = [0u8; 4];
        self.read_exact(&mut found, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset: at,
                expected,
                found,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let at = self.offset;
        let found = self.u32("version")?;
        if found != expected {
            return Err(FormatError::BadVersion {
                offset: at,
                expected,
                found,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, context: &'static str) -> Result<u32, FormatError> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, context)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn f64(&mut self, context: &'static str) -> Result<f64, FormatError> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf, context)?;
        Ok(f64::from_le_bytes(buf))
    }

    pub fn f32_vec(&mut self, count: usize, context: &'static str) -> Result<Vec<f32>, FormatError> {
        let mut bytes = vec![0u8; count * 4];
        self.read_exact(&mut bytes, context)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn bytes(&mut self, count: usize, context: &'static str) -> Result<Vec<u8>, FormatError> {
        let mut buf = vec![0u8; count];
        self.read_exact(&mut buf, context)?;
        Ok(buf)
    }

    /// Fails unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(FormatError::TrailingBytes { offset: self.offset }),
            Err(e) => Err(FormatError::Io(e)),
        }
    }
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32_slice<W: Write>(w: &mut W, vs: &[f32]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}
