//! Exact cosine top-k search over a flat, contiguous reference matrix.
//!
//! Scores are `f32` dot products of unit rows accumulated in `f64`. Ranking
//! is by descending score with ties broken by ascending reference id, so the
//! top-k of a query is a pure function of the inputs whatever the thread
//! count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{l2_normalize, EmbeddingError, EmbeddingSet};
use crate::format::FormatError;

/// References scanned per block; sized so a block stays cache resident.
const BLOCK_BYTES: usize = 256 * 1024;
/// Queries sharing one pass over a reference block.
const QUERY_TILE: usize = 8;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("reference set is empty")]
    EmptyIndex,
    #[error("reference {id} is degenerate (norm {norm:e})")]
    DegenerateRow { id: u64, norm: f64 },
    #[error("query {id} is degenerate (norm {norm:e})")]
    DegenerateQuery { id: u64, norm: f64 },
    #[error("dimension mismatch: index has dim {index}, queries {queries}")]
    DimMismatch { index: usize, queries: usize },
    #[error("k = {k} outside 1..={refs}")]
    KOutOfRange { k: usize, refs: usize },
    #[error("reference row {row} is not unit norm ({norm})")]
    NotUnit { row: usize, norm: f64 },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Unit-normalized references laid out row-major for sequential scanning.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    ids: Vec<u64>,
    dim: usize,
    data: Vec<f32>,
}

impl FlatIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Bytes of reference payload (`f32` rows only).
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Heap bytes held by the index.
    pub fn heap_bytes(&self) -> usize {
        self.data.capacity() * std::mem::size_of::<f32>()
            + self.ids.capacity() * std::mem::size_of::<u64>()
    }

    /// Wraps rows that are already unit norm (within 1e-5) without copying
    /// through normalization.
    pub fn from_unit_rows(set: EmbeddingSet) -> Result<Self, MatchError> {
        if set.is_empty() {
            return Err(MatchError::EmptyIndex);
        }
        for (row, r) in set.rows().enumerate() {
            let norm = crate::embedding::norm_f64(r);
            if (norm - 1.0).abs() > 1e-5 {
                return Err(MatchError::NotUnit { row, norm });
            }
        }
        let (ids, dim, data) = set.into_parts();
        Ok(Self { ids, dim, data })
    }
}

pub fn build_index(refs: &EmbeddingSet) -> Result<FlatIndex, MatchError> {
    if refs.is_empty() {
        return Err(MatchError::EmptyIndex);
    }
    let mut data = Vec::with_capacity(refs.data().len());
    for (i, row) in refs.rows().enumerate() {
        match l2_normalize(row) {
            Ok(u) => data.extend_from_slice(&u),
            Err(EmbeddingError::Degenerate { norm }) => {
                return Err(MatchError::DegenerateRow {
                    id: refs.ids()[i],
                    norm,
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(FlatIndex {
        ids: refs.ids().to_vec(),
        dim: refs.dim(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hit {
    pub ref_id: u64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub query_id: u64,
    pub hits: Vec<Hit>,
}

/// Dot product with eight `f64` partial sums, combined pairwise.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] as f64 * cb[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    (s + tail) as f32
}

/// A candidate ordered so that "greater" means "ranks higher".
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f32,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Bounded top-k keeper; the heap top is the current worst survivor.
struct TopK {
    k: usize,
    heap: BinaryHeap<std::cmp::Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(c));
        } else if let Some(worst) = self.heap.peek() {
            if c > worst.0 {
                self.heap.pop();
                self.heap.push(std::cmp::Reverse(c));
            }
        }
    }

    fn into_hits(self) -> Vec<Hit> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v.into_iter()
            .map(|c| Hit {
                ref_id: c.id,
                score: c.score,
            })
            .collect()
    }
}

fn scan_tile(index: &FlatIndex, tile: &[(u64, Vec<f32>)], k: usize) -> Vec<MatchResult> {
    let dim = index.dim;
    let block_rows = (BLOCK_BYTES / (dim * 4)).max(1);
    let mut keepers: Vec<TopK> = tile.iter().map(|_| TopK::new(k)).collect();
    for start in (0..index.len()).step_by(block_rows) {
        let end = (start + block_rows).min(index.len());
        for ((_, q), keeper) in tile.iter().zip(keepers.iter_mut()) {
            for r in start..end {
                let score = dot(q, &index.data[r * dim..(r + 1) * dim]);
                keeper.offer(Candidate {
                    score,
                    id: index.ids[r],
                });
            }
        }
    }
    tile.iter()
        .zip(keepers)
        .map(|((id, _), keeper)| MatchResult {
            query_id: *id,
            hits: keeper.into_hits(),
        })
        .collect()
}

/// Exact top-k for every query, in query order. Queries are L2-normalized
/// first, so scores are cosines.
pub fn search(index: &FlatIndex, queries: &EmbeddingSet, k: usize) -> Result<Vec<MatchResult>, MatchError> {
    if queries.dim() != index.dim {
        return Err(MatchError::DimMismatch {
            index: index.dim,
            queries: queries.dim(),
        });
    }
    if k < 1 || k > index.len() {
        return Err(MatchError::KOutOfRange { k, refs: index.len() });
    }
    let normalized: Vec<(u64, Vec<f32>)> = queries
        .ids()
        .iter()
        .zip(queries.rows())
        .map(|(&id, row)| match l2_normalize(row) {
            Ok(u) => Ok((id, u)),
            Err(EmbeddingError::Degenerate { norm }) => Err(MatchError::DegenerateQuery { id, norm }),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_, _>>()?;
    Ok(normalized
        .par_chunks(QUERY_TILE)
        .map(|tile| scan_tile(index, tile, k))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// [`search`] on a dedicated pool of `threads` workers.
pub fn search_with_threads(
    index: &FlatIndex,
    queries: &EmbeddingSet,
    k: usize,
    threads: usize,
) -> Result<Vec<MatchResult>, MatchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| MatchError::ThreadPool(e.to_string()))?;
    pool.install(|| search(index, queries, k))
}

/// Scan throughput for one search call, in the units used for reporting.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanStats {
    pub refs: usize,
    pub queries: usize,
    pub dim: usize,
    pub threads: usize,
    pub seconds: f64,
    /// Wall-clock seconds per (query, reference) pair.
    pub seconds_per_pair: f64,
    /// Reference payload bytes scored per second per worker thread.
    pub bytes_per_sec_per_thread: f64,
}

pub fn measure_scan(
    index: &FlatIndex,
    queries: &EmbeddingSet,
    k: usize,
    threads: usize,
) -> Result<(Vec<MatchResult>, ScanStats), MatchError> {
    let start = Instant::now();
    let results = search_with_threads(index, queries, k, threads)?;
    let seconds = start.elapsed().as_secs_f64();
    let pairs = (index.len() * queries.len()) as f64;
    let bytes = pairs * (index.dim * 4) as f64;
    Ok((
        results,
        ScanStats {
            refs: index.len(),
            queries: queries.len(),
            dim: index.dim,
            threads: threads.max(1),
            seconds,
            seconds_per_pair: seconds / pairs,
            bytes_per_sec_per_thread: bytes / seconds / threads.max(1) as f64,
        },
    ))
}

/// `query_id<TAB>rank<TAB>ref_id<TAB>score` lines, ranks starting at 1.
pub fn format_results(results: &[MatchResult]) -> String {
    let mut out = String::new();
    for r in results {
        for (rank, h) in r.hits.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.query_id, rank + 1, h.ref_id, h.score));
        }
    }
    out
}

pub fn write_results(results: &[MatchResult], path: &Path) -> Result<(), FormatError> {
    fs::write(path, format_results(results)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<MatchResult>, FormatError> {
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parse_err = |line: usize, msg: String| FormatError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out: Vec<MatchResult> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let query_id: u64 = f[0].parse().map_err(|_| parse_err(i + 1, "bad query id".into()))?;
        let rank: usize = f[1].parse().map_err(|_| parse_err(i + 1, "bad rank".into()))?;
        let ref_id: u64 = f[2].parse().map_err(|_| parse_err(i + 1, "bad ref id".into()))?;
        let score: f32 = f[3].parse().map_err(|_| parse_err(i + 1, "bad score".into()))?;
        let continues = matches!(out.last(), Some(r) if r.query_id == query_id);
        if !continues {
            out.push(MatchResult {
                query_id,
                hits: Vec::new(),
            });
        }
        let current = out.last_mut().expect("pushed above");
        if rank != current.hits.len() + 1 {
            return Err(parse_err(i + 1, format!("rank {rank} out of sequence")));
        }
        current.hits.push(Hit { ref_id, score });
    }
    Ok(out)
}
