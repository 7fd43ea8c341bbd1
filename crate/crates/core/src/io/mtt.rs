//! `.mtt` tensor container.
//!
//! Layout: magic `MTT1`, one dtype byte (0=f32, 1=f64, 2=complex64,
//! 3=complex128), one rank byte, `rank` little-endian u64 dims, then the
//! row-major little-endian payload. Complex elements are stored as
//! interleaved `(re, im)` pairs.

use std::path::Path;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTT1";

#[derive(Clone, Debug, PartialEq)]
pub enum MttData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Complex64(Vec<Complex<f32>>),
    Complex128(Vec<Complex<f64>>),
}

impl MttData {
    pub fn dtype(&self) -> DType {
        match self {
            MttData::F32(_) => DType::F32,
            MttData::F64(_) => DType::F64,
            MttData::Complex64(_) => DType::Complex64,
            MttData::Complex128(_) => DType::Complex128,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            MttData::F32(v) => v.len(),
            MttData::F64(v) => v.len(),
            MttData::Complex64(v) => v.len(),
            MttData::Complex128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MttFile {
    pub dims: Vec<usize>,
    pub data: MttData,
}

impl MttFile {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => MttData::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            _ => MttData::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        MttFile {
            dims: t.shape().to_vec(),
            data,
        }
    }

    pub fn from_complex<T: Scalar>(dims: &[usize], values: &[Complex<T>]) -> Self {
        let data = match T::DTYPE {
            DType::F32 => MttData::Complex64(
                values
                    .iter()
                    .map(|c| Complex::new(c.re.to_f64_lossy() as f32, c.im.to_f64_lossy() as f32))
                    .collect(),
            ),
            _ => MttData::Complex128(
                values
                    .iter()
                    .map(|c| Complex::new(c.re.to_f64_lossy(), c.im.to_f64_lossy()))
                    .collect(),
            ),
        };
        MttFile {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Real payload converted to `T`; complex payloads are rejected.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            MttData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            MttData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            other => {
                return Err(Error::invalid(format!(
                    "expected a real tensor, found {}",
                    other.dtype()
                )))
            }
        };
        Tensor::new(self.dims.clone(), data)
    }

    /// Complex payload converted to `T`; real payloads get a zero imaginary part.
    pub fn to_complex<T: Scalar>(&self) -> Vec<Complex<T>> {
        match &self.data {
            MttData::F32(v) => v.iter().map(|&x| Complex::new(T::lit(x as f64), T::zero())).collect(),
            MttData::F64(v) => v.iter().map(|&x| Complex::new(T::lit(x), T::zero())).collect(),
            MttData::Complex64(v) => v
                .iter()
                .map(|c| Complex::new(T::lit(c.re as f64), T::lit(c.im as f64)))
                .collect(),
            MttData::Complex128(v) => v.iter().map(|c| Complex::new(T::lit(c.re), T::lit(c.im))).collect(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::invalid("tensor rank exceeds 255"));
        }
        let n: usize = self.dims.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "dims {:?} do not match {} elements",
                self.dims,
                self.data.len()
            )));
        }
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.dims.len() + n * dtype.element_size());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            MttData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            MttData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            MttData::Complex64(v) => v.iter().for_each(|c| {
                c.re.write_le(&mut out);
                c.im.write_le(&mut out);
            }),
            MttData::Complex128(v) => v.iter().for_each(|c| {
                c.re.write_le(&mut out);
                c.im.write_le(&mut out);
            }),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("missing MTT1 magic"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
            dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("dimension overflow"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let payload = &bytes[header..];
        if payload.len() != n * dtype.element_size() {
            return Err(bad(&format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                n * dtype.element_size()
            )));
        }
        let data = match dtype {
            DType::F32 => MttData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => MttData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
            DType::Complex64 => MttData::Complex64(
                payload
                    .chunks_exact(8)
                    .map(|c| Complex::new(f32::read_le(&c[..4]), f32::read_le(&c[4..])))
                    .collect(),
            ),
            DType::Complex128 => MttData::Complex128(
                payload
                    .chunks_exact(16)
                    .map(|c| Complex::new(f64::read_le(&c[..8]), f64::read_le(&c[8..])))
                    .collect(),
            ),
        };
        Ok(MttFile { dims, data })
    }
}

pub fn write_mtt(path: &Path, file: &MttFile) -> Result<()> {
    write_atomic(path, &file.encode()?)
}

pub fn read_mtt(path: &Path) -> Result<MttFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MttFile::decode(&bytes, path)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_mtt(path, &MttFile::from_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_mtt(path)?.to_tensor()
}
