//! The `.msma` tensor file.
//!
//! Layout (little-endian):
//!
//! | offset | size      | field                         |
//! |--------|-----------|-------------------------------|
//! | 0      | 4         | magic `b"MSMA"`               |
//! | 4      | 2         | version (`u16`, currently 1)  |
//! | 6      | 1         | dtype (`0` = f32)             |
//! | 7      | 1         | rank (≤ 4)                    |
//! | 8      | 8 × rank  | shape entries (`u64`, > 0)    |
//! | ...    | 4 × ∏shape| row-major f32 payload         |

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{MsmaError, Result};

pub const MAGIC: [u8; 4] = *b"MSMA";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const MAX_RANK: usize = 4;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Tensor { shape, data };
        t.validate("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.shape.is_empty() || self.shape.len() > MAX_RANK {
            return Err(MsmaError::validation(
                field,
                format!("rank {} outside 1..={MAX_RANK}", self.shape.len()),
            ));
        }
        if self.shape.iter().any(|&s| s == 0) {
            return Err(MsmaError::validation(field, "shape entries must be > 0"));
        }
        if self.numel() != self.data.len() {
            return Err(MsmaError::validation(
                field,
                format!(
                    "data length {} does not match shape {:?}",
                    self.data.len(),
                    self.shape
                ),
            ));
        }
        Ok(())
    }

    /// Rank-2 tensor from an f64 matrix (rounded to f32).
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)] as f32);
            }
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    /// View a rank-2 tensor as an f64 matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rank() != 2 {
            return Err(MsmaError::DimensionMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(DMatrix::from_fn(r, c, |i, j| self.data[i * c + j] as f64))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.rank() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.rank() as u8);
        for &s in &self.shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a tensor; `path` only labels error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let eof = |offset: usize| MsmaError::UnexpectedEof {
            path: path.to_path_buf(),
            offset: offset as u64,
        };
        let take = |offset: usize, len: usize| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or_else(|| eof(bytes.len()))
        };

        let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(MsmaError::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(MsmaError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let dtype = take(6, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(MsmaError::validation(
                "dtype",
                format!("unsupported dtype code {dtype} in {}", path.display()),
            ));
        }
        let rank = take(7, 1)?[0] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(MsmaError::validation(
                "rank",
                format!("rank {rank} outside 1..={MAX_RANK} in {}", path.display()),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let s = u64::from_le_bytes(take(8 + 8 * i, 8)?.try_into().expect("8 bytes"));
            if s == 0 {
                return Err(MsmaError::validation(
                    "shape",
                    format!("zero-sized dimension {i} in {}", path.display()),
                ));
            }
            shape.push(s as usize);
        }
        let header = 8 + 8 * rank;
        let numel: u64 = shape.iter().map(|&s| s as u64).product();
        let expected = numel * 4;
        let found = (bytes.len() - header) as u64;
        if found != expected {
            return Err(MsmaError::PayloadSizeMismatch {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MsmaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MsmaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
