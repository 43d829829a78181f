//! Latent sequence buffer and its binary container format.
//!
//! Binary layout (little-endian): 4-byte magic, then `u32` dims, then the
//! values as `f32` in row-major order. Latents use magic `LATS` with dims
//! `(L, D, 0)`; the header is 16 bytes.

use std::io::{self, Read, Write};

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LATENT_MAGIC: [u8; 4] = *b"LATS";

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { found: [u8; 4], expected: [u8; 4] },
    #[error("payload has {found} values, header declares {declared}")]
    Truncated { declared: usize, found: usize },
    #[error("ragged rows: frame {frame} has {len} values, expected {dim}")]
    Ragged { frame: usize, len: usize, dim: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `L` frames of `D`-dimensional latent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    values: Array2<f64>,
}

impl LatentSequence {
    pub fn zeros(num_frames: usize, dim: usize) -> Self {
        Self {
            values: Array2::zeros((num_frames, dim)),
        }
    }

    /// Wraps a matrix, rejecting NaN and infinities.
    pub fn new(values: Array2<f64>) -> Result<Self, LatentError> {
        check_finite(values.view())?;
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LatentError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(LatentError::Ragged { frame: i, len: row.len(), dim });
            }
            for (j, &x) in row.iter().enumerate() {
                values[[i, j]] = x;
            }
        }
        Self::new(values)
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.values.view_mut()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    }

    pub fn ensure_shape(&self, expected: (usize, usize)) -> Result<(), LatentError> {
        if self.shape() != expected {
            return Err(LatentError::Shape { expected, actual: self.shape() });
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<(), LatentError> {
        let (l, d) = self.shape();
        write_f32_container(w, LATENT_MAGIC, &[l as u32, d as u32, 0], self.values.iter().copied())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self, LatentError> {
        let (dims, data) = read_f32_container(r, LATENT_MAGIC, 3, 2)?;
        let (l, d) = (dims[0] as usize, dims[1] as usize);
        let values = Array2::from_shape_vec((l, d), data.into_iter().map(f64::from).collect())
            .expect("length checked against header");
        Self::new(values)
    }
}

impl Serialize for LatentSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatentSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Self::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn check_finite(values: ArrayView2<'_, f64>) -> Result<(), LatentError> {
    for ((frame, dim), x) in values.indexed_iter() {
        if !x.is_finite() {
            return Err(LatentError::NonFinite { frame, dim });
        }
    }
    Ok(())
}

/// Writes `magic`, the `u32` dims and the values as little-endian `f32`.
pub fn write_f32_container<W: Write>(
    mut w: W,
    magic: [u8; 4],
    dims: &[u32],
    values: impl Iterator<Item = f64>,
) -> Result<(), LatentError> {
    w.write_all(&magic)?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for x in values {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a container written by [`write_f32_container`]. The element count
/// is the product of the first `shape_dims` of the `ndims` header words.
pub fn read_f32_container<R: Read>(
    mut r: R,
    magic: [u8; 4],
    ndims: usize,
    shape_dims: usize,
) -> Result<(Vec<u32>, Vec<f32>), LatentError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if found != magic {
        return Err(LatentError::Magic { found, expected: magic });
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut word = [0u8; 4];
    for _ in 0..ndims {
        r.read_exact(&mut word)?;
        dims.push(u32::from_le_bytes(word));
    }
    let declared: usize = dims[..shape_dims].iter().map(|&d| d as usize).product();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != declared * 4 {
        return Err(LatentError::Truncated { declared, found: bytes.len() / 4 });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}
