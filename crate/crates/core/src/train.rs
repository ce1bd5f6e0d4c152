//! Gradient-descent fit of the projection matrix.
//!
//! Each step draws a batch of (generated, origin) pairs, projects both sides
//! through the current `W`, L2-normalizes, and scores generated rows against
//! every origin in the batch. The matching origin is the positive; the other
//! in-batch origins are negatives. `W` is updated with Adam under a linear
//! warmup and cosine decay schedule.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingSet, ProjectionMatrix};
use crate::format::GroundTruth;
use crate::loss::{projected_loss_and_grad, LossError, LossKind, LossParams};
use crate::rng::{gaussian_vec, substream};

const TAG_INIT: u64 = 0x696e_6974;
const TAG_BATCH: u64 = 0x6261_7463;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: origins have dim {origins}, generated {generated}")]
    DimMismatch { origins: usize, generated: usize },
    #[error("rank {rank} exceeds input dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("no ground truth for generated id {0}")]
    MissingGroundTruth(u64),
    #[error("ground truth for generated id {query} names origin {origin}, which is not in the origin set")]
    MissingOrigin { query: u64, origin: u64 },
    #[error("need at least two training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("loss became non-finite ({loss}) at step {step} (lr {lr:e}); lower peak_lr or scale")]
    NonFiniteLoss { step: usize, loss: f64, lr: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    /// Entries drawn from `N(0, 1/n)`.
    Gaussian,
    /// The first `m` columns of the identity.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rank: usize,
    pub loss: LossKind,
    pub scale: f64,
    pub margin: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub init: InitKind,
}

impl TrainConfig {
    /// Defaults for `loss`: its standard scale and margin, peak learning rate
    /// 3.5e-4, 5% warmup.
    pub fn new(rank: usize, loss: LossKind) -> Self {
        let (scale, margin) = loss.default_hyper();
        let total_steps = 2000;
        Self {
            rank,
            loss,
            scale,
            margin,
            peak_lr: 3.5e-4,
            warmup_steps: total_steps / 20,
            total_steps,
            batch_size: 256,
            seed: 0,
            weight_decay: 0.0,
            init: InitKind::Gaussian,
        }
    }

    /// Sets `total_steps` and rescales warmup to 5% of it.
    pub fn with_steps(mut self, total_steps: usize) -> Self {
        self.total_steps = total_steps;
        self.warmup_steps = total_steps / 20;
        self
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            kind: self.loss,
            scale: self.scale,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.rank < 1 {
            return bad("rank must be >= 1");
        }
        if !(self.scale > 0.0) {
            return bad("scale must be > 0");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to 0 at
/// `total`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let decay = self.total.saturating_sub(self.warmup);
        if decay == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup) as f64 / decay as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    pub fn new(shape: (usize, usize), weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    pub fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (eps, wd) = (self.eps, self.weight_decay);
        ndarray::Zip::from(param)
            .and(grad)
            .and(&mut self.m)
            .and(&mut self.v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub w: ProjectionMatrix,
    pub final_loss: f64,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    /// Mean loss over the `window` steps ending at `step` (inclusive).
    pub fn moving_average(&self, step: usize, window: usize) -> f64 {
        let end = (step + 1).min(self.log.len());
        let start = end.saturating_sub(window);
        let slice = &self.log[start..end];
        slice.iter().map(|e| e.loss).sum::<f64>() / slice.len().max(1) as f64
    }
}

pub(crate) fn to_array(set: &EmbeddingSet) -> Array2<f64> {
    Array2::from_shape_fn((set.len(), set.dim()), |(i, j)| set.data()[i * set.dim() + j] as f64)
}

pub fn init_weights(n: usize, m: usize, init: InitKind, seed: u64) -> Array2<f64> {
    match init {
        InitKind::Gaussian => {
            let mut rng = substream(seed, &[TAG_INIT, n as u64, m as u64]);
            let std = 1.0 / (n as f64).sqrt();
            let v: Vec<f64> = gaussian_vec(&mut rng, n * m).into_iter().map(|x| x * std).collect();
            Array2::from_shape_vec((n, m), v).expect("shape matches")
        }
        InitKind::Identity => Array2::from_shape_fn((n, m), |(i, j)| if i == j { 1.0 } else { 0.0 }),
    }
}

/// Batch loss and `dL/dW` for raw (unprojected) rows.
pub fn batch_loss_and_grad(
    w: ArrayView2<f64>,
    gen: ArrayView2<f64>,
    origins: ArrayView2<f64>,
    labels: &[usize],
    params: &LossParams,
) -> Result<(f64, Array2<f64>), TrainError> {
    let pg = gen.dot(&w);
    let po = origins.dot(&w);
    let out = projected_loss_and_grad(params, pg.view(), po.view(), labels)?;
    let mut grad = gen.t().dot(&out.grad_gen);
    grad += &origins.t().dot(&out.grad_origins);
    Ok((out.loss, grad))
}

/// Resolves each generated row to its origin row.
fn pair_rows(
    origins: &EmbeddingSet,
    generated: &EmbeddingSet,
    truth: &GroundTruth,
) -> Result<Vec<usize>, TrainError> {
    let index = origins.index_of();
    generated
        .ids()
        .iter()
        .map(|&q| {
            let o = truth.origin_of(q).ok_or(TrainError::MissingGroundTruth(q))?;
            index
                .get(&o)
                .copied()
                .ok_or(TrainError::MissingOrigin { query: q, origin: o })
        })
        .collect()
}

pub fn train(
    origins: &EmbeddingSet,
    generated: &EmbeddingSet,
    truth: &GroundTruth,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if origins.dim() != generated.dim() {
        return Err(TrainError::DimMismatch {
            origins: origins.dim(),
            generated: generated.dim(),
        });
    }
    let n = origins.dim();
    if cfg.rank > n {
        return Err(TrainError::RankTooLarge { rank: cfg.rank, dim: n });
    }
    let pairs = pair_rows(origins, generated, truth)?;
    if pairs.len() < 2 {
        return Err(TrainError::TooFewPairs(pairs.len()));
    }

    let gen_all = to_array(generated);
    let orig_all = to_array(origins);
    let params = cfg.loss_params();
    let schedule = LrSchedule {
        peak: cfg.peak_lr,
        warmup: cfg.warmup_steps,
        total: cfg.total_steps,
    };
    let mut w = init_weights(n, cfg.rank, cfg.init, cfg.seed);
    let mut adam = Adam::new((n, cfg.rank), cfg.weight_decay);
    let mut rng = substream(cfg.seed, &[TAG_BATCH]);
    let batch = cfg.batch_size.min(pairs.len());
    let mut log = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let lr = schedule.at(step);
        let mut rows = sample(&mut rng, pairs.len(), batch).into_vec();
        rows.sort_unstable();

        // Several generated rows may share an origin; keep each origin once.
        let mut uniq: Vec<usize> = Vec::with_capacity(batch);
        let labels: Vec<usize> = rows
            .iter()
            .map(|&r| {
                let o = pairs[r];
                match uniq.iter().position(|&u| u == o) {
                    Some(p) => p,
                    None => {
                        uniq.push(o);
                        uniq.len() - 1
                    }
                }
            })
            .collect();

        let xg = gen_all.select(Axis(0), &rows);
        let xo = orig_all.select(Axis(0), &uniq);
        let (loss, grad) = batch_loss_and_grad(w.view(), xg.view(), xo.view(), &labels, &params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { step, loss, lr });
        }
        adam.step(&mut w, &grad, lr);
        log.push(LogEntry { step, loss, lr });
    }

    let final_loss = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    let w = ProjectionMatrix::from_f64(n, cfg.rank, w.as_slice().expect("standard layout"))?;
    Ok(TrainOutcome { w, final_loss, log })
}
