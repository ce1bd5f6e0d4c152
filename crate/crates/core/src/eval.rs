//! Retrieval metrics and the ablation grid.
//!
//! Every query has exactly one true origin, so its average precision is
//! `1 / rank` of that origin (0 when it is not retrieved). The pooled
//! micro-AP variant sorts every retrieved (query, reference) prediction by
//! score and integrates precision over the recall steps, with one positive
//! per query.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{project, EmbeddingError, EmbeddingSet, ProjectionMatrix};
use crate::format::GroundTruth;
use crate::loss::LossKind;
use crate::matcher::{build_index, search, MatchError, MatchResult};
use crate::sim::SimDataset;
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error("no ground truth for query {0}")]
    MissingGroundTruth(u64),
    #[error("query {0} appears more than once")]
    DuplicateQuery(u64),
    #[error("no queries to evaluate")]
    Empty,
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    MeanInverseRank,
    MicroAp,
    Both,
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean-inverse-rank" => Ok(Self::MeanInverseRank),
            "micro-ap" => Ok(Self::MicroAp),
            "both" => Ok(Self::Both),
            other => Err(format!(
                "unknown metric {other:?}, expected mean-inverse-rank, micro-ap or both"
            )),
        }
    }
}

pub fn average_precision_single(rank_of_truth: usize) -> Result<f64, EvalError> {
    if rank_of_truth == 0 {
        return Err(EvalError::ZeroRank);
    }
    Ok(1.0 / rank_of_truth as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over queries of `1 / rank` of the true origin.
    pub map: f64,
    /// Pooled micro average precision.
    pub micro_ap: f64,
    pub top1_acc: f64,
    pub n_queries: usize,
}

/// Scores ranked lists against the ground truth, looking at the first
/// `k_eval` hits of each query.
pub fn evaluate(matches: &[MatchResult], truth: &GroundTruth, k_eval: usize) -> Result<Metrics, EvalError> {
    if matches.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut seen = HashSet::with_capacity(matches.len());
    let mut ap_sum = 0.0;
    let mut top1 = 0usize;
    // (score, is_true, query, rank) for the pooled variant.
    let mut pooled: Vec<(f32, bool, u64, usize)> = Vec::new();
    for m in matches {
        if !seen.insert(m.query_id) {
            return Err(EvalError::DuplicateQuery(m.query_id));
        }
        let origin = truth
            .origin_of(m.query_id)
            .ok_or(EvalError::MissingGroundTruth(m.query_id))?;
        let hits = &m.hits[..m.hits.len().min(k_eval)];
        if let Some(pos) = hits.iter().position(|h| h.ref_id == origin) {
            ap_sum += average_precision_single(pos + 1)?;
            if pos == 0 {
                top1 += 1;
            }
        }
        pooled.extend(
            hits.iter()
                .enumerate()
                .map(|(r, h)| (h.score, h.ref_id == origin, m.query_id, r)),
        );
    }
    let n = matches.len();
    Ok(Metrics {
        map: ap_sum / n as f64,
        micro_ap: micro_average_precision(pooled, n),
        top1_acc: top1 as f64 / n as f64,
        n_queries: n,
    })
}

fn micro_average_precision(mut pooled: Vec<(f32, bool, u64, usize)>, positives: usize) -> f64 {
    // Ties resolve by query then rank so the value is order independent.
    pooled.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (i, p) in pooled.iter().enumerate() {
        if p.1 {
            tp += 1;
            ap += tp as f64 / (i + 1) as f64;
        }
    }
    ap / positives as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub profile: String,
    pub strength: f64,
    /// Loss used to train `W`, or `None` for raw embeddings.
    pub loss: Option<LossKind>,
    pub rank: usize,
    pub seen: bool,
}

impl Cell {
    pub fn method(&self) -> String {
        match self.loss {
            Some(l) => l.to_string(),
            None => "raw".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_score: f64,
    pub micro_ap: f64,
    pub top1_acc: f64,
    pub n_queries: usize,
    pub cell: Cell,
}

impl EvalReport {
    pub fn new(metrics: Metrics, cell: Cell) -> Self {
        Self {
            map_score: metrics.map,
            micro_ap: metrics.micro_ap,
            top1_acc: metrics.top1_acc,
            n_queries: metrics.n_queries,
            cell,
        }
    }
}

/// Projects references and queries through `w` (or uses them raw), searches
/// and evaluates.
pub fn evaluate_projection(
    refs: &EmbeddingSet,
    queries: &EmbeddingSet,
    truth: &GroundTruth,
    w: Option<&ProjectionMatrix>,
    k_eval: usize,
) -> Result<Metrics, EvalError> {
    let (r, q) = match w {
        Some(w) => (project(refs, w, true)?, project(queries, w, true)?),
        None => (refs.clone(), queries.clone()),
    };
    let index = build_index(&r)?;
    let matches = search(&index, &q, k_eval.min(index.len()))?;
    evaluate(&matches, truth, k_eval)
}

/// A grid run: train on one profile of `train_data`, evaluate every
/// (profile, strength) cell of `test_data`.
#[derive(Debug, Clone)]
pub struct GridSpec<'a> {
    pub train_data: &'a SimDataset,
    pub test_data: &'a SimDataset,
    pub train_profile: String,
    pub train_strength: f64,
    pub configs: Vec<TrainConfig>,
    /// Also report the untransformed embeddings.
    pub include_raw: bool,
    /// Restrict evaluation to these profiles (all when empty).
    pub profiles: Vec<String>,
    /// Restrict evaluation to these strengths (all when empty).
    pub strengths: Vec<f64>,
    pub k_eval: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub reports: Vec<EvalReport>,
    /// Trained matrices, one per config, in config order.
    pub matrices: Vec<ProjectionMatrix>,
    pub train_seconds: Vec<f64>,
}

pub fn run_grid(spec: &GridSpec<'_>) -> Result<GridOutput, EvalError> {
    let gen = spec
        .train_data
        .queries(&spec.train_profile, spec.train_strength)
        .ok_or_else(|| {
            EvalError::Grid(format!(
                "training data has no queries for profile {:?} at strength {}",
                spec.train_profile, spec.train_strength
            ))
        })?;
    if !spec
        .test_data
        .profiles()
        .iter()
        .any(|p| p.name() == spec.train_profile)
    {
        return Err(EvalError::Grid(format!(
            "train profile {:?} is not among the test profiles",
            spec.train_profile
        )));
    }
    let cells: Vec<(&str, f64, &EmbeddingSet)> = spec
        .test_data
        .query_sets()
        .iter()
        .filter(|q| spec.profiles.is_empty() || spec.profiles.contains(&q.profile))
        .filter(|q| spec.strengths.is_empty() || spec.strengths.contains(&q.strength))
        .map(|q| (q.profile.as_str(), q.strength, &q.set))
        .collect();
    if cells.is_empty() {
        return Err(EvalError::Grid("no evaluation cells selected".into()));
    }

    let trained: Vec<(ProjectionMatrix, f64)> = spec
        .configs
        .par_iter()
        .map(|cfg| {
            let start = std::time::Instant::now();
            let out = train(spec.train_data.origins(), gen, spec.train_data.ground_truth(), cfg)?;
            Ok((out.w, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, EvalError>>()?;

    let refs = spec.test_data.origins();
    let truth = spec.test_data.ground_truth();
    let mut methods: Vec<(Option<&ProjectionMatrix>, Option<LossKind>, usize)> = Vec::new();
    if spec.include_raw {
        methods.push((None, None, refs.dim()));
    }
    for ((w, _), cfg) in trained.iter().zip(&spec.configs) {
        methods.push((Some(w), Some(cfg.loss), cfg.rank));
    }

    let jobs: Vec<_> = methods
        .iter()
        .flat_map(|m| cells.iter().map(move |c| (m, c)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|((w, loss, rank), (profile, strength, queries))| {
            let metrics = evaluate_projection(refs, queries, truth, *w, spec.k_eval)?;
            Ok(EvalReport::new(
                metrics,
                Cell {
                    profile: profile.to_string(),
                    strength: *strength,
                    loss: *loss,
                    rank: *rank,
                    seen: *profile == spec.train_profile,
                },
            ))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let (matrices, train_seconds) = trained.into_iter().unzip();
    Ok(GridOutput {
        reports,
        matrices,
        train_seconds,
    })
}

/// Mean mAP over the unseen cells matching `loss` and `rank`.
pub fn unseen_mean(reports: &[EvalReport], loss: Option<LossKind>, rank: usize) -> Option<f64> {
    let v: Vec<f64> = reports
        .iter()
        .filter(|r| !r.cell.seen && r.cell.loss == loss && r.cell.rank == rank)
        .map(|r| r.map_score)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aligned text table: one row per (method, rank, strength), one
/// `mAP / Acc` column per profile (seen profile first), then the unseen mean.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut profiles: Vec<(bool, String)> = reports
        .iter()
        .map(|r| (!r.cell.seen, r.cell.profile.clone()))
        .collect();
    profiles.sort();
    profiles.dedup();

    type RowKey = (String, usize, u64);
    let mut rows: BTreeMap<RowKey, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    let mut order: Vec<RowKey> = Vec::new();
    for r in reports {
        let key = (r.cell.method(), r.cell.rank, r.cell.strength.to_bits());
        if !rows.contains_key(&key) {
            order.push(key.clone());
        }
        rows.entry(key)
            .or_default()
            .insert(r.cell.profile.clone(), (r.map_score, r.top1_acc));
    }

    let mut header = vec!["method".to_string(), "rank".to_string(), "strength".to_string()];
    for (unseen, p) in &profiles {
        header.push(format!("{p} ({})", if *unseen { "unseen" } else { "seen" }));
    }
    header.push("unseen avg".to_string());

    let mut table = vec![header];
    for key in &order {
        let cols = &rows[key];
        let mut line = vec![key.0.clone(), key.1.to_string(), format!("{}", f64::from_bits(key.2))];
        let mut unseen = Vec::new();
        for (is_unseen, p) in &profiles {
            match cols.get(p) {
                Some((map, acc)) => {
                    line.push(format!("{:.1} / {:.1}", 100.0 * map, 100.0 * acc));
                    if *is_unseen {
                        unseen.push((*map, *acc));
                    }
                }
                None => line.push("-".to_string()),
            }
        }
        if unseen.is_empty() {
            line.push("-".to_string());
        } else {
            let n = unseen.len() as f64;
            let (m, a) = unseen.iter().fold((0.0, 0.0), |s, x| (s.0 + x.0, s.1 + x.1));
            line.push(format!("{:.1} / {:.1}", 100.0 * m / n, 100.0 * a / n));
        }
        table.push(line);
    }

    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
