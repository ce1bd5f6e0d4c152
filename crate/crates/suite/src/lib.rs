//! The synthetic benchmark used for acceptance, and slow reference oracles
//! the engine is checked against.

use std::cmp::Ordering;

use ndarray::Array2;

use oid_core::embedding::EmbeddingSet;
use oid_core::loss::LossKind;
use oid_core::matcher::{Hit, MatchResult};
use oid_core::sim::{
    generate_dataset, generate_dataset_with_variants, NoiseSchedule, ResidualSpectrum, SimDataset,
    SimError, SimModelProfile,
};
use oid_core::train::TrainConfig;

pub const DIM: usize = 256;
pub const N_ORIGINS: usize = 2000;
/// Translations per origin in the training split.
pub const VARIANTS: usize = 10;
pub const TRAIN_SEED: u64 = 0;
pub const TEST_SEED: u64 = 1;
pub const TRAIN_STRENGTH: f64 = 0.9;
pub const TEST_STRENGTHS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const PEAK_LR: f64 = 3e-3;
pub const STEPS: usize = 3000;

pub const SEEN: &str = "seen";
pub const UNSEEN: [&str; 2] = ["u1", "u2"];

/// `(name, sigma_resid, style_seed)` for the seen profile and the two unseen
/// ones.
pub const PROFILES: [(&str, f64, u64); 3] = [(SEEN, 0.6, 1), ("u1", 0.4, 2), ("u2", 0.8, 3)];

pub fn profile(name: &str) -> Result<SimModelProfile, SimError> {
    let (name, sigma, style) = PROFILES
        .iter()
        .copied()
        .find(|p| p.0 == name)
        .ok_or_else(|| SimError::InvalidParameters(format!("no benchmark profile {name:?}")))?;
    SimModelProfile::new(name, sigma, style, DIM, ResidualSpectrum::default_for(DIM))
}

pub fn profiles() -> Result<Vec<SimModelProfile>, SimError> {
    PROFILES.iter().map(|p| profile(p.0)).collect()
}

/// Training split: `VARIANTS` translations per origin at the training
/// strength, for each named profile.
pub fn train_set(names: &[&str]) -> Result<SimDataset, SimError> {
    let ps = names.iter().map(|n| profile(n)).collect::<Result<Vec<_>, _>>()?;
    generate_dataset_with_variants(
        N_ORIGINS,
        VARIANTS,
        DIM,
        &ps,
        &[TRAIN_STRENGTH],
        TRAIN_SEED,
        &NoiseSchedule::default(),
    )
}

/// Held-out split: fresh origins, one translation per cell, every profile
/// at every test strength.
pub fn test_set() -> Result<SimDataset, SimError> {
    generate_dataset(
        N_ORIGINS,
        DIM,
        &profiles()?,
        &TEST_STRENGTHS,
        TEST_SEED,
        &NoiseSchedule::default(),
    )
}

pub fn train_config(rank: usize, loss: LossKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(rank, loss).with_steps(STEPS);
    cfg.peak_lr = PEAK_LR;
    cfg.seed = seed;
    cfg
}

/// Unit row in `f64`, then rounded to `f32`.
fn unit(row: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f64;
    for &x in row {
        ss += x as f64 * x as f64;
    }
    let norm = ss.sqrt();
    row.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

/// Scores every (query, reference) pair with a sequential `f64` sum, sorts
/// all of them, and keeps the first `k`. Ties go to the smaller id.
pub fn naive_search(refs: &EmbeddingSet, queries: &EmbeddingSet, k: usize) -> Vec<MatchResult> {
    let units: Vec<Vec<f32>> = refs.rows().map(unit).collect();
    queries
        .ids()
        .iter()
        .zip(queries.rows())
        .map(|(&qid, q)| {
            let q = unit(q);
            let mut all: Vec<Hit> = units
                .iter()
                .zip(refs.ids())
                .map(|(r, &id)| {
                    let mut s = 0.0f64;
                    for i in 0..q.len() {
                        s += q[i] as f64 * r[i] as f64;
                    }
                    Hit {
                        ref_id: id,
                        score: s as f32,
                    }
                })
                .collect();
            all.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap() {
                Ordering::Equal => a.ref_id.cmp(&b.ref_id),
                o => o,
            });
            all.truncate(k);
            MatchResult {
                query_id: qid,
                hits: all,
            }
        })
        .collect()
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn central_difference(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        *g = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a - b| / |b|` in the Frobenius norm, with `b` the reference.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let base = b.mapv(|v| v * v).sum().sqrt();
    diff / base.max(1e-300)
}
