//! Dense embedding containers, normalization and linear projection.
//!
//! Multi-channel latents are flattened channel-major, then row-major over the
//! spatial grid, before they reach an [`EmbeddingSet`]. Matrix products
//! accumulate in `f64` and store `f32`.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

/// Vectors with an L2 norm at or below this are treated as degenerate.
pub const EPS_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("payload holds {values} values, expected {rows} rows of dim {dim}")]
    ShapeMismatch { rows: usize, dim: usize, values: usize },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("degenerate vector: norm {norm:e} is not above {EPS_NORM:e}")]
    Degenerate { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid projection shape {n}x{m}: need 1 <= m <= n")]
    InvalidProjectionShape { n: usize, m: usize },
}

/// Ids plus a row-major `f32` matrix, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<u64>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<u64>, dim: usize, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if ids.len().checked_mul(dim) != Some(data.len()) {
            return Err(EmbeddingError::ShapeMismatch {
                rows: ids.len(),
                dim,
                values: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(EmbeddingError::DuplicateId(id));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { ids, dim, data })
    }

    /// Builds a set from explicit rows. Every row must have length `dim`.
    pub fn from_rows(ids: Vec<u64>, dim: usize, rows: &[Vec<f32>]) -> Result<Self, EmbeddingError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(EmbeddingError::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(ids, dim, data)
    }

    pub fn empty(dim: usize) -> Result<Self, EmbeddingError> {
        Self::new(Vec::new(), dim, Vec::new())
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Map from id to row index.
    pub fn index_of(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    pub fn into_parts(self) -> (Vec<u64>, usize, Vec<f32>) {
        (self.ids, self.dim, self.data)
    }
}

/// The learned `n x m` linear map applied to row vectors (`z * W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    n: usize,
    m: usize,
    data: Vec<f32>,
}

impl ProjectionMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if m == 0 || m > n {
            return Err(EmbeddingError::InvalidProjectionShape { n, m });
        }
        if data.len() != n * m {
            return Err(EmbeddingError::ShapeMismatch {
                rows: n,
                dim: m,
                values: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                row: pos / m,
                col: pos % m,
            });
        }
        Ok(Self { n, m, data })
    }

    pub fn identity(n: usize) -> Result<Self, EmbeddingError> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(n, n, data)
    }

    pub fn from_f64(n: usize, m: usize, data: &[f64]) -> Result<Self, EmbeddingError> {
        Self::new(n, m, data.iter().map(|&v| v as f32).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.m + col]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// `c * W`.
    pub fn scaled(&self, c: f32) -> Result<Self, EmbeddingError> {
        Self::new(self.n, self.m, self.data.iter().map(|v| v * c).collect())
    }
}

pub fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, EmbeddingError> {
    let norm = norm_f64(v);
    if !(norm > EPS_NORM) {
        return Err(EmbeddingError::Degenerate { norm });
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

pub fn l2_normalize_f64(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > EPS_NORM) {
        return Err(EmbeddingError::Degenerate { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `row * W` accumulated in `f64`.
pub(crate) fn project_row(row: &[f32], w: &[f64], m: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; m];
    for (i, &x) in row.iter().enumerate() {
        let x = x as f64;
        if x == 0.0 {
            continue;
        }
        let w_row = &w[i * m..(i + 1) * m];
        for (a, &wv) in acc.iter_mut().zip(w_row) {
            *a += x * wv;
        }
    }
    acc
}

/// Projects every row through `W`, optionally L2-normalizing the result.
pub fn project(
    set: &EmbeddingSet,
    w: &ProjectionMatrix,
    normalize: bool,
) -> Result<EmbeddingSet, EmbeddingError> {
    if set.dim() != w.n() {
        return Err(EmbeddingError::DimMismatch {
            expected: w.n(),
            actual: set.dim(),
        });
    }
    let m = w.m();
    let w64 = w.to_f64();
    let rows: Vec<Vec<f32>> = set
        .data()
        .par_chunks(set.dim())
        .map(|row| {
            let acc = project_row(row, &w64, m);
            if normalize {
                l2_normalize_f64(&acc).map(|u| u.into_iter().map(|v| v as f32).collect())
            } else {
                Ok(acc.into_iter().map(|v| v as f32).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let data = rows.into_iter().flatten().collect();
    EmbeddingSet::new(set.ids().to_vec(), m, data)
}
