//! RNVT: a minimal little-endian n-d tensor container.
//!
//! Layout: magic `RNVT`, `u32` version 1, `u8` dtype code, `u8` ndim, two
//! zero bytes, `ndim` × `u64` dims, then the row-major data.

use std::path::Path;

use super::write_atomic;
use crate::{Error, Grid, Result};

const MAGIC: &[u8; 4] = b"RNVT";
const VERSION: u32 = 1;
const HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I64 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U8,
            3 => Dtype::I64,
            other => return Err(Error::Format(format!("unknown RNVT dtype code {other}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64` (lossy only for very large `i64`).
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// An n-dimensional tensor; zero dims denote a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct RnvtTensor {
    dims: Vec<u64>,
    data: TensorData,
}

fn element_count(dims: &[u64]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
        .ok_or_else(|| Error::Format("tensor dims overflow".into()))
}

impl RnvtTensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::input("RNVT supports at most 255 dims"));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(Error::input(format!(
                "dims {dims:?} need {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            dims: vec![grid.height() as u64, grid.width() as u64, grid.channels() as u64],
            data: TensorData::F64(grid.data().to_vec()),
        }
    }

    /// `H × W × C` grid stored as `f32`.
    pub fn from_grid_f32(grid: &Grid) -> Self {
        Self {
            dims: vec![grid.height() as u64, grid.width() as u64, grid.channels() as u64],
            data: TensorData::F32(grid.data().iter().map(|&v| v as f32).collect()),
        }
    }

    /// Reads a 3-d tensor of any dtype as a grid.
    pub fn to_grid(&self) -> Result<Grid> {
        let [h, w, c] = self.dims[..] else {
            return Err(Error::Format(format!("expected 3 dims, found {}", self.dims.len())));
        };
        Grid::from_vec(h as usize, w as usize, c as usize, self.data.to_f64())
    }

    pub fn byte_len(&self) -> usize {
        HEADER + 8 * self.dims.len() + self.dtype().size() * self.data.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Format("RNVT header truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad RNVT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported RNVT version {version}")));
        }
        let dtype = Dtype::from_code(bytes[8])?;
        let ndim = bytes[9] as usize;
        if bytes[10] != 0 || bytes[11] != 0 {
            return Err(Error::Format("RNVT reserved bytes must be zero".into()));
        }
        let data_start = HEADER + 8 * ndim;
        if bytes.len() < data_start {
            return Err(Error::Format("RNVT dims truncated".into()));
        }
        let dims: Vec<u64> = bytes[HEADER..data_start]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let n = element_count(&dims)?;
        let expected = n
            .checked_mul(dtype.size())
            .and_then(|b| b.checked_add(data_start))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "RNVT length is {} bytes, header declares {expected}",
                bytes.len()
            )));
        }
        let raw = &bytes[data_start..];
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(raw.to_vec()),
            Dtype::I64 => TensorData::I64(
                raw.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_rnvt(path: &Path, tensor: &RnvtTensor) -> Result<()> {
    write_atomic(path, &tensor.encode())
}

pub fn read_rnvt(path: &Path) -> Result<RnvtTensor> {
    RnvtTensor::decode(&std::fs::read(path)?)
}
