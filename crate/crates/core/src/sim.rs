//! Synthetic (origin, translation) pairs from a latent diffusion round trip.
//!
//! A translation noises an origin latent to the step selected by the editing
//! strength and denoises it in one step with an imperfect noise predictor:
//!
//! ```text
//! z_t   = sqrt(ab) * z0 + sqrt(1 - ab) * eps
//! z0'   = (z_t - sqrt(1 - ab) * eps_theta) / sqrt(ab)
//!       = z0 + sqrt(1 - ab) / sqrt(ab) * (eps - eps_theta)
//! ```
//!
//! The predictor residual is `eps - eps_theta = sigma * S * (sqrt(lambda) . eta)`
//! with `eta ~ N(0, I)`. `lambda` is a residual variance spectrum shared by all
//! simulated models (mean 1, a small "clean" block where prediction is
//! nearly exact), and `S` is a per-model orthogonal style map that is
//! block-diagonal over the same split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingSet};
use crate::format::GroundTruth;
use crate::rng::{fold_key, gaussian_vec, label_tag, substream};

const TAG_ORIGIN: u64 = 0x6f72_6967;
const TAG_PAIR: u64 = 0x7061_6972;
const TAG_STYLE: u64 = 0x7374_796c;
const TAG_TRANSLATE: u64 = 0x7472_616e;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("strength {0} outside the allowed range")]
    StrengthOutOfRange(f64),
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid profile {name:?}: {msg}")]
    InvalidProfile { name: String, msg: String },
    #[error("invalid simulation parameters: {0}")]
    InvalidParameters(String),
    #[error("vector has dim {actual}, profile expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Linear beta schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, SimError> {
        if steps < 1 {
            return Err(SimError::InvalidSchedule("need at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(SimError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    /// `alpha_bar[t]` for `t = 0..=steps`, with `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

pub fn alpha_bar_at(strength: f64, schedule: &NoiseSchedule) -> Result<f64, SimError> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(SimError::StrengthOutOfRange(strength));
    }
    let t = (strength * schedule.steps as f64).round() as usize;
    Ok(schedule.alpha_bar[t.min(schedule.steps)])
}

/// `sqrt(1 - ab) / sqrt(ab)`, the gain applied to the predictor residual.
pub fn residual_gain(alpha_bar: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() / alpha_bar.sqrt()
}

/// Shape of the residual variance across latent coordinates.
///
/// The first `clean_dims` coordinates carry relative variance
/// `clean_variance`, the rest carry 1; inside each block the variance ramps
/// linearly from `1 - spread` to `1 + spread` times the block level, and the
/// whole profile is rescaled to mean 1. The ramp is what makes the per-model
/// style rotation observable in the residual covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpectrum {
    pub clean_dims: usize,
    pub clean_variance: f64,
    pub spread: f64,
}

impl ResidualSpectrum {
    /// Flat spectrum, no clean block: `S * eta` is then isotropic for every
    /// style map.
    pub fn isotropic() -> Self {
        Self {
            clean_dims: 0,
            clean_variance: 1.0,
            spread: 0.0,
        }
    }

    pub fn default_for(dim: usize) -> Self {
        Self {
            clean_dims: (dim / 16).max(1),
            clean_variance: 5e-5,
            spread: 0.5,
        }
    }

    pub fn variances(&self, dim: usize) -> Vec<f64> {
        let spread = self.spread;
        let ramp = |j: usize, size: usize| {
            if size <= 1 {
                1.0
            } else {
                1.0 - spread + 2.0 * spread * j as f64 / (size - 1) as f64
            }
        };
        let k = self.clean_dims.min(dim);
        let mut v: Vec<f64> = (0..k)
            .map(|j| self.clean_variance * ramp(j, k))
            .chain((0..dim - k).map(|j| ramp(j, dim - k)))
            .collect();
        let mean = v.iter().sum::<f64>() / dim as f64;
        v.iter_mut().for_each(|x| *x /= mean);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StyleBlock {
    offset: usize,
    size: usize,
    /// Row-major orthogonal `size x size` matrix.
    q: Vec<f64>,
}

/// One simulated diffusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimModelProfile {
    name: String,
    sigma_resid: f64,
    style_seed: u64,
    dim: usize,
    spectrum: ResidualSpectrum,
    residual_scale: Vec<f64>,
    blocks: Vec<StyleBlock>,
}

impl SimModelProfile {
    pub fn new(
        name: impl Into<String>,
        sigma_resid: f64,
        style_seed: u64,
        dim: usize,
        spectrum: ResidualSpectrum,
    ) -> Result<Self, SimError> {
        let name = name.into();
        let invalid = |msg: String| SimError::InvalidProfile {
            name: name.clone(),
            msg,
        };
        if !(sigma_resid >= 0.0 && sigma_resid.is_finite()) {
            return Err(invalid(format!("sigma_resid must be >= 0, got {sigma_resid}")));
        }
        if dim == 0 {
            return Err(invalid("dim must be positive".into()));
        }
        if spectrum.clean_dims >= dim && dim > 1 {
            return Err(invalid(format!(
                "clean_dims {} must be below dim {dim}",
                spectrum.clean_dims
            )));
        }
        if !(spectrum.clean_variance > 0.0 && spectrum.clean_variance.is_finite()) {
            return Err(invalid("clean_variance must be positive".into()));
        }
        if !(0.0..1.0).contains(&spectrum.spread) {
            return Err(invalid("spread must be in [0, 1)".into()));
        }
        let residual_scale = spectrum.variances(dim).into_iter().map(f64::sqrt).collect();
        let k = spectrum.clean_dims.min(dim);
        let blocks = [(0, k), (k, dim - k)]
            .into_iter()
            .enumerate()
            .filter(|(_, (_, size))| *size > 0)
            .map(|(b, (offset, size))| StyleBlock {
                offset,
                size,
                q: seeded_orthogonal(size, style_seed, b as u64),
            })
            .collect();
        Ok(Self {
            name,
            sigma_resid,
            style_seed,
            dim,
            spectrum,
            residual_scale,
            blocks,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sigma_resid(&self) -> f64 {
        self.sigma_resid
    }

    pub fn style_seed(&self) -> u64 {
        self.style_seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spectrum(&self) -> ResidualSpectrum {
        self.spectrum
    }

    /// The full `dim x dim` style map, row-major.
    pub fn style_map(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.dim * self.dim];
        for b in &self.blocks {
            for i in 0..b.size {
                for j in 0..b.size {
                    s[(b.offset + i) * self.dim + b.offset + j] = b.q[i * b.size + j];
                }
            }
        }
        s
    }

    /// `S * (sqrt(lambda) . eta)`, before the `sigma_resid` factor.
    pub fn shape_residual(&self, eta: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = eta
            .iter()
            .zip(&self.residual_scale)
            .map(|(e, s)| e * s)
            .collect();
        let mut out = vec![0.0; self.dim];
        for b in &self.blocks {
            let x = &scaled[b.offset..b.offset + b.size];
            for i in 0..b.size {
                let row = &b.q[i * b.size..(i + 1) * b.size];
                out[b.offset + i] = row.iter().zip(x).map(|(q, v)| q * v).sum();
            }
        }
        out
    }
}

/// Orthonormal basis from a seeded Gaussian matrix by Gram-Schmidt with one
/// reorthogonalization pass. Columns of the returned row-major matrix are
/// the basis vectors.
fn seeded_orthogonal(size: usize, seed: u64, block: u64) -> Vec<f64> {
    let mut rng = substream(seed, &[TAG_STYLE, block, size as u64]);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(size);
    while cols.len() < size {
        let mut v = gaussian_vec(&mut rng, size);
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A draw numerically inside the span is discarded and redrawn.
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    let mut q = vec![0.0; size * size];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q[i * size + j] = v;
        }
    }
    q
}

/// Everything drawn for one translation, kept for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub output: Vec<f64>,
    pub noised: Vec<f64>,
    pub eps: Vec<f64>,
    pub eps_theta: Vec<f64>,
    pub alpha_bar: f64,
}

impl Translation {
    /// Denoises `noised` with `eps_theta` in one step, the literal reverse
    /// of the forward noising.
    pub fn reverse_step(&self) -> Vec<f64> {
        let a = self.alpha_bar.sqrt();
        let b = (1.0 - self.alpha_bar).sqrt();
        self.noised
            .iter()
            .zip(&self.eps_theta)
            .map(|(zt, e)| (zt - b * e) / a)
            .collect()
    }

    /// `|| (reverse_step - z0) - gain * (eps - eps_theta) ||`.
    pub fn identity_error(&self, z0: &[f64]) -> f64 {
        let gain = residual_gain(self.alpha_bar);
        self.reverse_step()
            .iter()
            .zip(z0)
            .zip(self.eps.iter().zip(&self.eps_theta))
            .map(|((r, z), (e, et))| {
                let d = (r - z) - gain * (e - et);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub fn translate(
    z0: &[f64],
    strength: f64,
    profile: &SimModelProfile,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Translation, SimError> {
    if !(strength > 0.0 && strength < 1.0) {
        return Err(SimError::StrengthOutOfRange(strength));
    }
    if z0.len() != profile.dim {
        return Err(SimError::DimMismatch {
            expected: profile.dim,
            actual: z0.len(),
        });
    }
    let alpha_bar = alpha_bar_at(strength, schedule)?;
    if !(alpha_bar > 0.0) {
        return Err(SimError::StrengthOutOfRange(strength));
    }
    let mut rng = substream(rng_seed, &[TAG_TRANSLATE]);
    let eps = gaussian_vec(&mut rng, profile.dim);
    let eta = gaussian_vec(&mut rng, profile.dim);
    let shaped = profile.shape_residual(&eta);
    let eps_theta: Vec<f64> = eps
        .iter()
        .zip(&shaped)
        .map(|(e, r)| e - profile.sigma_resid * r)
        .collect();

    let gain = residual_gain(alpha_bar);
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let noised = z0.iter().zip(&eps).map(|(z, e)| a * z + b * e).collect();
    let output = z0
        .iter()
        .zip(eps.iter().zip(&eps_theta))
        .map(|(z, (e, et))| z + gain * (e - et))
        .collect();
    Ok(Translation {
        output,
        noised,
        eps,
        eps_theta,
        alpha_bar,
    })
}

/// Queries produced by one (profile, strength) cell: `variants` blocks of
/// rows, each aligned with the origins.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub profile: String,
    pub strength: f64,
    pub set: EmbeddingSet,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    origins: EmbeddingSet,
    queries: Vec<QuerySet>,
    ground_truth: GroundTruth,
    profiles: Vec<SimModelProfile>,
    strengths: Vec<f64>,
    schedule: NoiseSchedule,
    master_seed: u64,
    variants: usize,
}

pub const MAX_VARIANTS: usize = 256;

/// Query id for variant `variant` of origin `origin_index` in cell `cell`
/// (cells enumerate profiles outer, strengths inner).
pub fn query_id(cell: usize, variant: usize, origin_index: usize) -> u64 {
    ((cell as u64 + 1) << 40) | ((variant as u64) << 32) | origin_index as u64
}

fn pair_seed(
    master_seed: u64,
    origin: u64,
    variant: u64,
    profile: &SimModelProfile,
    strength: f64,
) -> u64 {
    fold_key(&[
        master_seed,
        TAG_PAIR,
        origin,
        variant,
        label_tag(&profile.name) ^ profile.style_seed,
        strength.to_bits(),
    ])
}

fn origin_row(master_seed: u64, origin: u64, dim: usize) -> Vec<f32> {
    let mut rng = substream(master_seed, &[TAG_ORIGIN, origin]);
    gaussian_vec(&mut rng, dim).into_iter().map(|v| v as f32).collect()
}

/// One translation per origin for every (profile, strength) cell.
pub fn generate_dataset(
    n_origins: usize,
    dim: usize,
    profiles: &[SimModelProfile],
    strengths: &[f64],
    master_seed: u64,
    schedule: &NoiseSchedule,
) -> Result<SimDataset, SimError> {
    generate_dataset_with_variants(n_origins, 1, dim, profiles, strengths, master_seed, schedule)
}

/// Like [`generate_dataset`] with `variants` independent translations of
/// each origin per cell.
pub fn generate_dataset_with_variants(
    n_origins: usize,
    variants: usize,
    dim: usize,
    profiles: &[SimModelProfile],
    strengths: &[f64],
    master_seed: u64,
    schedule: &NoiseSchedule,
) -> Result<SimDataset, SimError> {
    let bad = |m: String| Err(SimError::InvalidParameters(m));
    if !(1..=MAX_VARIANTS).contains(&variants) {
        return bad(format!("variants must be in 1..={MAX_VARIANTS}, got {variants}"));
    }
    if profiles.len() * strengths.len() >= 1 << 23 {
        return bad("too many (profile, strength) cells".into());
    }
    if n_origins < 2 || n_origins as u64 > u32::MAX as u64 {
        return bad(format!("n_origins must be in 2..2^32, got {n_origins}"));
    }
    if dim < 2 {
        return bad(format!("dim must be >= 2, got {dim}"));
    }
    for (i, p) in profiles.iter().enumerate() {
        if p.dim != dim {
            return Err(SimError::DimMismatch {
                expected: dim,
                actual: p.dim,
            });
        }
        if profiles[..i].iter().any(|q| q.name == p.name) {
            return bad(format!("duplicate profile name {:?}", p.name));
        }
    }
    for (i, &s) in strengths.iter().enumerate() {
        if !(s > 0.0 && s < 1.0) {
            return Err(SimError::StrengthOutOfRange(s));
        }
        if strengths[..i].contains(&s) {
            return bad(format!("duplicate strength {s}"));
        }
    }

    let rows: Vec<Vec<f32>> = (0..n_origins as u64)
        .into_par_iter()
        .map(|o| origin_row(master_seed, o, dim))
        .collect();
    let origins = EmbeddingSet::from_rows((0..n_origins as u64).collect(), dim, &rows)?;

    let mut queries = Vec::with_capacity(profiles.len() * strengths.len());
    let mut ground_truth = GroundTruth::new();
    for (p_idx, profile) in profiles.iter().enumerate() {
        for (s_idx, &strength) in strengths.iter().enumerate() {
            let cell = p_idx * strengths.len() + s_idx;
            let outputs: Vec<Vec<f32>> = (0..variants * n_origins)
                .into_par_iter()
                .map(|i| {
                    let (v, o) = (i / n_origins, i % n_origins);
                    let z0: Vec<f64> = rows[o].iter().map(|&x| x as f64).collect();
                    let seed = pair_seed(master_seed, o as u64, v as u64, profile, strength);
                    translate(&z0, strength, profile, schedule, seed)
                        .map(|t| t.output.into_iter().map(|x| x as f32).collect())
                })
                .collect::<Result<_, _>>()?;
            let ids: Vec<u64> = (0..variants * n_origins)
                .map(|i| query_id(cell, i / n_origins, i % n_origins))
                .collect();
            for (i, &q) in ids.iter().enumerate() {
                ground_truth.insert(q, (i % n_origins) as u64);
            }
            queries.push(QuerySet {
                profile: profile.name.clone(),
                strength,
                set: EmbeddingSet::from_rows(ids, dim, &outputs)?,
            });
        }
    }
    Ok(SimDataset {
        origins,
        queries,
        ground_truth,
        profiles: profiles.to_vec(),
        strengths: strengths.to_vec(),
        schedule: schedule.clone(),
        master_seed,
        variants,
    })
}

impl SimDataset {
    pub fn origins(&self) -> &EmbeddingSet {
        &self.origins
    }

    pub fn query_sets(&self) -> &[QuerySet] {
        &self.queries
    }

    pub fn queries(&self, profile: &str, strength: f64) -> Option<&EmbeddingSet> {
        self.queries
            .iter()
            .find(|q| q.profile == profile && q.strength == strength)
            .map(|q| &q.set)
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.ground_truth
    }

    pub fn profiles(&self) -> &[SimModelProfile] {
        &self.profiles
    }

    pub fn strengths(&self) -> &[f64] {
        &self.strengths
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn variants(&self) -> usize {
        self.variants
    }

    /// Recomputes the full translation record behind one stored query.
    pub fn replay_pair(
        &self,
        origin_index: usize,
        variant: usize,
        profile_index: usize,
        strength_index: usize,
    ) -> Result<Translation, SimError> {
        let profile = &self.profiles[profile_index];
        let strength = self.strengths[strength_index];
        let z0: Vec<f64> = self
            .origins
            .row(origin_index)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let seed = pair_seed(self.master_seed, origin_index as u64, variant as u64, profile, strength);
        translate(&z0, strength, profile, &self.schedule, seed)
    }
}
