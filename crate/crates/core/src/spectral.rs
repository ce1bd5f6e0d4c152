//! Spectral diagnostics for projection matrices.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration in `f64`: column pairs
//! of `W` are rotated until mutually orthogonal, after which the column
//! norms are the singular values. It is slow for very wide matrices but
//! accurate to working precision on the small singular values the rank
//! checks depend on.

use serde::Serialize;
use thiserror::Error;

use crate::embedding::{EmbeddingSet, ProjectionMatrix, EPS_NORM};
use crate::format::GroundTruth;

/// Relative tolerance for effective rank: `sigma_i > tol * sigma_1`.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;
const MAX_SWEEPS: usize = 80;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("SVD did not converge within {sweeps} sweeps (off-diagonal {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("SVD reconstruction error {error:e} exceeds {bound:e}")]
    Reconstruction { error: f64, bound: f64 },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("singular value vector is all zero")]
    ZeroSpectrum,
    #[error("no pairs given")]
    EmptyInput,
    #[error("pair sets disagree: {0}")]
    PairMismatch(String),
    #[error("matrix contains non-finite values")]
    NonFinite,
}

/// Thin SVD `W = U diag(sigma) V^T` with `sigma` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub n: usize,
    pub m: usize,
    /// `n x m`, row-major.
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `m x m`, row-major.
    pub v: Vec<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..m)
                    .map(|k| self.u[i * m + k] * self.sigma[k] * self.v[j * m + k])
                    .sum();
            }
        }
        out
    }
}

/// One-sided Jacobi SVD of a row-major `n x m` matrix with `m <= n`.
pub fn svd(data: &[f64], n: usize, m: usize) -> Result<Svd, SpectralError> {
    assert!(m <= n && data.len() == n * m, "svd expects a tall n x m matrix");
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| data[i * m + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..m).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Orthogonality threshold grows with column length to absorb rounding in the dot products.
    let eps = 4.0 * (n as f64).sqrt() * f64::EPSILON;
    let mut converged = false;
    let mut off = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        off = 0.0;
        for p in 0..m {
            for q in p + 1..m {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut s = (0.0, 0.0, 0.0);
                    for (x, y) in a.iter().zip(b) {
                        s.0 += x * x;
                        s.1 += y * y;
                        s.2 += x * y;
                    }
                    s
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel <= eps {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SpectralError::NoConvergence {
            sweeps: MAX_SWEEPS,
            off,
        });
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u = vec![0.0; n * m];
    let mut v = vec![0.0; m * m];
    let mut sigma = Vec::with_capacity(m);
    for (k, &(s, j)) in order.iter().enumerate() {
        sigma.push(s);
        if s > 0.0 {
            for i in 0..n {
                u[i * m + k] = cols[j][i] / s;
            }
        }
        for i in 0..m {
            v[i * m + k] = vcols[j][i];
        }
    }
    Ok(Svd { n, m, u, sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// SVD of `W`, verified by reconstruction to `1e-6 * sigma_1` per element.
pub fn checked_svd(w: &ProjectionMatrix) -> Result<Svd, SpectralError> {
    let data = w.to_f64();
    let out = svd(&data, w.n(), w.m())?;
    let bound = 1e-6 * out.sigma.first().copied().unwrap_or(0.0);
    let error = out
        .reconstruct()
        .iter()
        .zip(&data)
        .fold(0.0f64, |acc, (r, d)| acc.max((r - d).abs()));
    if error > bound && error > f64::MIN_POSITIVE {
        return Err(SpectralError::Reconstruction { error, bound });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    /// `sigma_1 / sigma_r` over the kept values; infinite when nothing is kept.
    pub condition_number: f64,
    pub tol: f64,
}

impl SpectrumReport {
    pub fn from_values(singular_values: Vec<f64>, tol: f64) -> Self {
        let effective_rank = effective_rank(&singular_values, tol);
        let condition_number = if effective_rank == 0 {
            f64::INFINITY
        } else {
            singular_values[0] / singular_values[effective_rank - 1]
        };
        Self {
            singular_values,
            effective_rank,
            condition_number,
            tol,
        }
    }
}

pub fn effective_rank(sigma: &[f64], tol: f64) -> usize {
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().filter(|&&s| s > tol * s1).count(),
        _ => 0,
    }
}

pub fn singular_values(w: &ProjectionMatrix) -> Result<SpectrumReport, SpectralError> {
    singular_values_with_tol(w, DEFAULT_RANK_TOL)
}

pub fn singular_values_with_tol(w: &ProjectionMatrix, tol: f64) -> Result<SpectrumReport, SpectralError> {
    Ok(SpectrumReport::from_values(checked_svd(w)?.sigma, tol))
}

/// Cosine between the descending singular-value vectors of two matrices.
pub fn sv_cosine(w1: &ProjectionMatrix, w2: &ProjectionMatrix) -> Result<f64, SpectralError> {
    if (w1.n(), w1.m()) != (w2.n(), w2.m()) {
        return Err(SpectralError::ShapeMismatch {
            a: (w1.n(), w1.m()),
            b: (w2.n(), w2.m()),
        });
    }
    let a = checked_svd(w1)?.sigma;
    let b = checked_svd(w2)?.sigma;
    spectrum_cosine(&a, &b)
}

pub fn spectrum_cosine(a: &[f64], b: &[f64]) -> Result<f64, SpectralError> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SpectralError::ZeroSpectrum);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentResidual {
    /// Mean of `|(z_g - z_o) W| / max(|z_o W|, EPS_NORM)`.
    pub value: f64,
    pub pairs: usize,
    /// Pairs whose denominator hit the `EPS_NORM` floor.
    pub floored_pairs: usize,
}

impl AlignmentResidual {
    pub fn is_degenerate(&self) -> bool {
        self.floored_pairs > 0
    }
}

/// How far `W` is from annihilating the translation differences, relative
/// to the projected origins. Rows of `origins` and `generated` are paired
/// by position.
pub fn alignment_residual(
    origins: &EmbeddingSet,
    generated: &EmbeddingSet,
    w: &ProjectionMatrix,
) -> Result<AlignmentResidual, SpectralError> {
    if origins.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    if origins.len() != generated.len() {
        return Err(SpectralError::PairMismatch(format!(
            "{} origins vs {} generated rows",
            origins.len(),
            generated.len()
        )));
    }
    if origins.dim() != w.n() || generated.dim() != w.n() {
        return Err(SpectralError::PairMismatch(format!(
            "row dims {} / {} vs W with {} rows",
            origins.dim(),
            generated.dim(),
            w.n()
        )));
    }
    Ok(residual_over(origins.rows().zip(generated.rows()), w))
}

/// [`alignment_residual`] with generated rows paired to their origins
/// through `truth`, so several translations may share one origin.
pub fn alignment_residual_by_truth(
    origins: &EmbeddingSet,
    generated: &EmbeddingSet,
    truth: &GroundTruth,
    w: &ProjectionMatrix,
) -> Result<AlignmentResidual, SpectralError> {
    if generated.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    if origins.dim() != w.n() || generated.dim() != w.n() {
        return Err(SpectralError::PairMismatch(format!(
            "row dims {} / {} vs W with {} rows",
            origins.dim(),
            generated.dim(),
            w.n()
        )));
    }
    let index = origins.index_of();
    let mut pairs = Vec::with_capacity(generated.len());
    for (i, &q) in generated.ids().iter().enumerate() {
        let o = truth
            .origin_of(q)
            .ok_or_else(|| SpectralError::PairMismatch(format!("no ground truth for generated id {q}")))?;
        let &row = index
            .get(&o)
            .ok_or_else(|| SpectralError::PairMismatch(format!("origin {o} of generated id {q} not found")))?;
        pairs.push((origins.row(row), generated.row(i)));
    }
    Ok(residual_over(pairs.into_iter(), w))
}

fn residual_over<'a>(pairs: impl Iterator<Item = (&'a [f32], &'a [f32])>, w: &ProjectionMatrix) -> AlignmentResidual {
    let w64 = w.to_f64();
    let m = w.m();
    let mut total = 0.0;
    let mut count = 0;
    let mut floored = 0;
    for (zo, zg) in pairs {
        let diff: Vec<f32> = zg.iter().zip(zo).map(|(g, o)| g - o).collect();
        let num = norm(&crate::embedding::project_row(&diff, &w64, m));
        let den = norm(&crate::embedding::project_row(zo, &w64, m));
        if !(den > EPS_NORM) {
            floored += 1;
        }
        total += num / den.max(EPS_NORM);
        count += 1;
    }
    AlignmentResidual {
        value: total / count as f64,
        pairs: count,
        floored_pairs: floored,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeftInverseReport {
    pub has_left_inverse: bool,
    /// `max |K W - I_m|` for the SVD pseudo-inverse `K`.
    pub residual: f64,
    pub effective_rank: usize,
}

/// Builds `K = V diag(1/sigma) U^T` over singular values above
/// `tol * sigma_1` and measures how close `K W` is to the identity.
pub fn left_inverse_check(w: &ProjectionMatrix, tol: f64) -> Result<LeftInverseReport, SpectralError> {
    let s = checked_svd(w)?;
    let (n, m) = (s.n, s.m);
    let rank = effective_rank(&s.sigma, tol);
    // K is m x n.
    let mut k = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            k[r * n + c] = (0..rank)
                .map(|j| s.v[r * m + j] * s.u[c * m + j] / s.sigma[j])
                .sum();
        }
    }
    let wd = w.to_f64();
    let mut residual = 0.0f64;
    for r in 0..m {
        for c in 0..m {
            let kw: f64 = (0..n).map(|i| k[r * n + i] * wd[i * m + c]).sum();
            let target = if r == c { 1.0 } else { 0.0 };
            residual = residual.max((kw - target).abs());
        }
    }
    Ok(LeftInverseReport {
        has_left_inverse: residual <= tol,
        residual,
        effective_rank: rank,
    })
}
