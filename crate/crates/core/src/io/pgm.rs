//! 16-bit binary PGM (P5) export, samples big-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;

pub const MAX_VALUE: u16 = 65535;

/// Encodes a row-major image; values are clamped to `[0, 1]` and scaled to 16 bits.
pub fn encode_pgm16<T: Scalar>(width: usize, height: usize, values: &[T]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::invalid(format!(
            "{} samples for a {width}×{height} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n{MAX_VALUE}\n").into_bytes();
    out.reserve(values.len() * 2);
    for &v in values {
        let v = v.to_f64_lossy();
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        let q = (v * MAX_VALUE as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16<T: Scalar>(path: &Path, width: usize, height: usize, values: &[T]) -> Result<()> {
    write_atomic(path, &encode_pgm16(width, height, values)?)
}

/// Decoded 16-bit PGM.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm16 {
    pub width: usize,
    pub height: usize,
    pub max_value: u16,
    pub samples: Vec<u16>,
}

impl Pgm16 {
    /// Samples rescaled to `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|&s| s as f64 / self.max_value as f64)
            .collect()
    }
}

pub fn decode_pgm16(bytes: &[u8], origin: &Path) -> Result<Pgm16> {
    let bad = |r: &str| Error::format(origin, r);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxv) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if !(256..=65535).contains(&maxv) {
        return Err(bad("only 16-bit PGM is supported"));
    }
    pos += 1;
    let payload = bytes.get(pos..).ok_or_else(|| bad("missing payload"))?;
    if payload.len() != width * height * 2 {
        return Err(bad("payload size mismatch"));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(Pgm16 {
        width,
        height,
        max_value: maxv as u16,
        samples,
    })
}

pub fn read_pgm16(path: &Path) -> Result<Pgm16> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm16(&bytes, path)
}
