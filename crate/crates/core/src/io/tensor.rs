//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `ATNS`                  |
//! | 4      | 2         | version (u16, currently 1)    |
//! | 6      | 2         | rank (u16)                    |
//! | 8      | 8 × rank  | dims (u64 each)               |
//! | ...    | 8 × ∏dims | payload, row-major f64        |
//!
//! A rank-0 tensor holds one scalar.

use std::path::Path;

use ndarray::Array2;

use crate::attention::AttentionMap;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ATNS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

fn element_count(dims: &[u64]) -> Result<usize> {
    let count = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .and_then(|n| n.checked_mul(8).map(|_| n))
        .and_then(|n| usize::try_from(n).ok());
    count.ok_or_else(|| Error::DimOverflow(dims.to_vec()))
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        if dims.len() > u16::MAX as usize {
            return Err(Error::InvalidInput(format!("rank {} too large", dims.len())));
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![x],
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        let (r, c) = m.dim();
        Self {
            dims: vec![r as u64, c as u64],
            data: m.iter().copied().collect(),
        }
    }

    /// Stack equally shaped matrices into a rank-3 tensor.
    pub fn stack(items: &[Array2<f64>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::InvalidInput("nothing to stack".into()));
        };
        let (r, c) = first.dim();
        if items.iter().any(|m| m.dim() != (r, c)) {
            return Err(Error::Shape("stacked matrices differ in shape".into()));
        }
        Ok(Self {
            dims: vec![items.len() as u64, r as u64, c as u64],
            data: items.iter().flat_map(|m| m.iter().copied()).collect(),
        })
    }

    /// Rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.dims[..] {
            [r, c] => Array2::from_shape_vec((r as usize, c as usize), self.data.clone())
                .map_err(|e| Error::Shape(e.to_string())),
            _ => Err(Error::Shape(format!("expected rank 2, got dims {:?}", self.dims))),
        }
    }

    /// Rank-2 tensor as one matrix, rank-3 tensor as a list of matrices.
    pub fn to_matrices(&self) -> Result<Vec<Array2<f64>>> {
        match self.dims[..] {
            [_, _] => Ok(vec![self.to_matrix()?]),
            [n, r, c] => {
                let (r, c) = (r as usize, c as usize);
                (0..n as usize)
                    .map(|i| {
                        Array2::from_shape_vec((r, c), self.data[i * r * c..(i + 1) * r * c].to_vec())
                            .map_err(|e| Error::Shape(e.to_string()))
                    })
                    .collect()
            }
            _ => Err(Error::Shape(format!("expected rank 2 or 3, got dims {:?}", self.dims))),
        }
    }

    pub fn to_attention_maps(&self) -> Result<Vec<AttentionMap>> {
        self.to_matrices()?.into_iter().map(AttentionMap::new).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u16).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected: u64| Error::TruncatedPayload {
            expected,
            found: bytes.len() as u64,
        };
        if bytes.len() < 8 {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic(bytes[..4].try_into().expect("4 bytes")));
            }
            return Err(truncated(8));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(truncated(header as u64));
        }
        let dims: Vec<u64> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let count = element_count(&dims)?;
        let expected = header as u64 + 8 * count as u64;
        if (bytes.len() as u64) < expected {
            return Err(truncated(expected));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::InvalidInput(format!(
                "{} trailing bytes after tensor payload",
                bytes.len() as u64 - expected
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}
