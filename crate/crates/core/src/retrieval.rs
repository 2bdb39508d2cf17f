//! Brute-force retrieval over candidate pools.
//!
//! Similarity is the raw dot product. Rankings sort by descending score and
//! break ties by ascending candidate id, so results do not depend on the
//! order candidates were inserted.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_slices, Embedding, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSetting {
    /// One shared database mixing every modality and task.
    Global,
    /// A task-specific database with a single modality.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub embedding: Embedding,
    pub source_task: String,
}

impl Candidate {
    pub fn new(id: u64, embedding: Embedding, source_task: impl Into<String>) -> Self {
        Self { id, embedding, source_task: source_task.into() }
    }

    pub fn modality(&self) -> Modality {
        self.embedding.modality
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalPool {
    candidates: Vec<Candidate>,
    setting: PoolSetting,
    matrix: Array2<f64>,
}

impl RetrievalPool {
    pub fn new(candidates: Vec<Candidate>, setting: PoolSetting) -> Result<Self> {
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c.id) {
                return Err(Error::DuplicateId(c.id));
            }
        }
        let dim = candidates.first().map_or(0, |c| c.embedding.dim());
        if let Some(c) = candidates.iter().find(|c| c.embedding.dim() != dim) {
            return Err(Error::shape(format!("candidate {} has dim {}, pool dim {dim}", c.id, c.embedding.dim())));
        }
        if setting == PoolSetting::Local {
            if let Some(first) = candidates.first() {
                let mixed = candidates
                    .iter()
                    .any(|c| c.modality() != first.modality() || c.source_task != first.source_task);
                if mixed {
                    return Err(Error::InvalidArgument(
                        "a local pool holds a single modality from a single task".into(),
                    ));
                }
            }
        }
        let flat: Vec<f64> = candidates.iter().flat_map(|c| c.embedding.values.iter().copied()).collect();
        let matrix = Array2::from_shape_vec((candidates.len(), dim), flat).expect("uniform dims");
        Ok(Self { candidates, setting, matrix })
    }

    pub fn local(candidates: Vec<Candidate>) -> Result<Self> {
        Self::new(candidates, PoolSetting::Local)
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn setting(&self) -> PoolSetting {
        self.setting
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn scores(&self, query: &Embedding) -> Result<Array1<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyPool);
        }
        if query.dim() != self.dim() {
            return Err(Error::shape(format!("query dim {} vs pool dim {}", query.dim(), self.dim())));
        }
        Ok(self.matrix.dot(&ArrayView1::from(&query.values[..])))
    }

    /// `true` when candidate `a` ranks ahead of candidate `b`.
    fn ahead(&self, scores: &Array1<f64>, a: usize, b: usize) -> bool {
        rank_order(scores[a], self.candidates[a].id, scores[b], self.candidates[b].id) == Ordering::Less
    }

    fn ranked_indices(&self, scores: &Array1<f64>, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            rank_order(scores[a], self.candidates[a].id, scores[b], self.candidates[b].id)
        };
        if k < idx.len() {
            idx.select_nth_unstable_by(k, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx
    }

    fn index_of(&self) -> BTreeMap<u64, usize> {
        self.candidates.iter().enumerate().map(|(i, c)| (c.id, i)).collect()
    }
}

fn rank_order(sa: f64, ida: u64, sb: f64, idb: u64) -> Ordering {
    sb.total_cmp(&sa).then(ida.cmp(&idb))
}

/// Concatenates candidate sources into one global pool.
pub fn build_global_pool(sources: Vec<Vec<Candidate>>) -> Result<RetrievalPool> {
    RetrievalPool::new(sources.into_iter().flatten().collect(), PoolSetting::Global)
}

fn check_k(k: usize, pool: &RetrievalPool) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k == 0 || k > pool.len() {
        return Err(Error::KOutOfRange { k, pool_size: pool.len() });
    }
    Ok(())
}

/// Ids of the `k` best candidates, best first.
pub fn top_k(query: &Embedding, pool: &RetrievalPool, k: usize) -> Result<Vec<u64>> {
    check_k(k, pool)?;
    let scores = pool.scores(query)?;
    Ok(pool.ranked_indices(&scores, k).into_iter().map(|i| pool.candidates[i].id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub ground_truth: BTreeMap<u64, BTreeSet<u64>>,
}

impl QuerySet {
    pub fn push(&mut self, id: u64, embedding: Embedding, gt: impl IntoIterator<Item = u64>) {
        self.queries.push(Query { id, embedding });
        self.ground_truth.entry(id).or_default().extend(gt);
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn gt_indices(&self, pool: &RetrievalPool) -> Result<Vec<Vec<usize>>> {
        let index = pool.index_of();
        self.queries
            .iter()
            .map(|q| {
                let gt = self
                    .ground_truth
                    .get(&q.id)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::InvalidArgument(format!("query {} has no ground truth", q.id)))?;
                gt.iter().map(|id| index.get(id).copied().ok_or(Error::UnknownGroundTruth(*id))).collect()
            })
            .collect()
    }
}

/// Per-query outcome against one pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: u64,
    /// 1-based rank of the best-placed ground-truth candidate.
    pub best_rank: usize,
    /// Cosine between the query and that candidate.
    pub gt_cosine: f64,
}

fn outcome(q: &Query, gt: &[usize], pool: &RetrievalPool) -> Result<QueryOutcome> {
    let scores = pool.scores(&q.embedding)?;
    let mut best = gt[0];
    for &g in &gt[1..] {
        if pool.ahead(&scores, g, best) {
            best = g;
        }
    }
    let beaten_by = (0..pool.len()).filter(|&c| pool.ahead(&scores, c, best)).count();
    Ok(QueryOutcome {
        id: q.id,
        best_rank: beaten_by + 1,
        gt_cosine: cosine_slices(&q.embedding.values, &pool.candidates[best].embedding.values),
    })
}

/// Best ground-truth rank for every query, in query order. Queries are
/// scored in parallel on the current rayon pool.
pub fn query_outcomes(queries: &QuerySet, pool: &RetrievalPool) -> Result<Vec<QueryOutcome>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let gts = queries.gt_indices(pool)?;
    queries.queries.par_iter().zip(gts.par_iter()).map(|(q, gt)| outcome(q, gt, pool)).collect()
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Fraction of queries with a ground-truth candidate in their top `k`.
pub fn recall_at_k(queries: &QuerySet, pool: &RetrievalPool, k: usize) -> Result<f64> {
    check_k(k, pool)?;
    let ranks: Vec<usize> = query_outcomes(queries, pool)?.iter().map(|o| o.best_rank).collect();
    Ok(recall_from_ranks(&ranks, k))
}

/// Histogram of ground-truth ranks.
///
/// Bucket `b` counts ranks in `[edges[b], edges[b + 1])`; the last bucket is
/// open-ended. Ranks above `rank_limit` are reported under two conventions:
/// `clipped` counts them at `rank_limit`, `dropped` leaves them out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub edges: Vec<usize>,
    pub counts: Vec<usize>,
    pub rank_limit: usize,
    pub clipped: Vec<usize>,
    pub dropped: Vec<usize>,
    pub beyond_limit: usize,
}

pub const DEFAULT_RANK_LIMIT: usize = 10_000;

/// `1, 2, 4, ...` up to and including the largest power of two `<= pool_size`.
pub fn power_of_two_edges(pool_size: usize) -> Vec<usize> {
    let mut edges = vec![1];
    while edges.last().unwrap() * 2 <= pool_size.max(1) {
        edges.push(edges.last().unwrap() * 2);
    }
    edges
}

impl RankHistogram {
    pub fn new(ranks: &[usize], edges: Vec<usize>, rank_limit: usize) -> Result<Self> {
        if edges.first() != Some(&1) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("histogram edges must start at 1 and increase".into()));
        }
        if rank_limit == 0 {
            return Err(Error::InvalidArgument("rank limit must be positive".into()));
        }
        let bucket = |r: usize| edges.partition_point(|&e| e <= r) - 1;
        let mut counts = vec![0; edges.len()];
        let mut clipped = vec![0; edges.len()];
        let mut dropped = vec![0; edges.len()];
        let mut beyond_limit = 0;
        for &r in ranks {
            counts[bucket(r)] += 1;
            clipped[bucket(r.min(rank_limit))] += 1;
            if r > rank_limit {
                beyond_limit += 1;
            } else {
                dropped[bucket(r)] += 1;
            }
        }
        Ok(Self { edges, counts, rank_limit, clipped, dropped, beyond_limit })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Best ground-truth rank per query plus their histogram (power-of-two
/// edges when `edges` is `None`).
pub fn rank_of_ground_truth(
    queries: &QuerySet,
    pool: &RetrievalPool,
    edges: Option<Vec<usize>>,
    rank_limit: usize,
) -> Result<(Vec<usize>, RankHistogram)> {
    let ranks: Vec<usize> = query_outcomes(queries, pool)?.iter().map(|o| o.best_rank).collect();
    let edges = edges.unwrap_or_else(|| power_of_two_edges(pool.len()));
    let hist = RankHistogram::new(&ranks, edges, rank_limit)?;
    Ok((ranks, hist))
}

pub fn cosine_to_ground_truth(queries: &QuerySet, pool: &RetrievalPool) -> Result<Vec<f64>> {
    Ok(query_outcomes(queries, pool)?.iter().map(|o| o.gt_cosine).collect())
}

/// Cosine between each query and its ranked candidates `1..=max_rank`.
pub fn cosine_series(query: &Embedding, pool: &RetrievalPool, max_rank: usize) -> Result<Vec<f64>> {
    check_k(max_rank, pool)?;
    let scores = pool.scores(query)?;
    Ok(pool
        .ranked_indices(&scores, max_rank)
        .into_iter()
        .map(|i| cosine_slices(&query.values, &pool.candidates[i].embedding.values))
        .collect())
}

/// Mean over queries of the cosine to the `r`-th ranked candidate, for
/// `r = 1..=max_rank`.
pub fn cosine_by_rank(queries: &QuerySet, pool: &RetrievalPool, max_rank: usize) -> Result<Vec<f64>> {
    check_k(max_rank, pool)?;
    if queries.is_empty() {
        return Ok(vec![0.0; max_rank]);
    }
    let series: Vec<Vec<f64>> = queries
        .queries
        .par_iter()
        .map(|q| cosine_series(&q.embedding, pool, max_rank))
        .collect::<Result<_>>()?;
    let mut means = vec![0.0; max_rank];
    for s in &series {
        for (m, v) in means.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = series.len() as f64;
    Ok(means.into_iter().map(|m| m / n).collect())
}

/// Evaluation options for [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Histogram edges; powers of two up to the pool size when absent.
    pub histogram_edges: Option<Vec<usize>>,
    pub rank_limit: usize,
    pub cosine_max_rank: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10, 20, 50], histogram_edges: None, rank_limit: DEFAULT_RANK_LIMIT, cosine_max_rank: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub setting: PoolSetting,
    pub pool_size: usize,
    pub n_queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub rank_histogram: RankHistogram,
    pub mean_gt_cosine: f64,
    pub cosine_by_rank: Vec<f64>,
    pub queries: Vec<QueryOutcome>,
}

pub fn evaluate(queries: &QuerySet, pool: &RetrievalPool, opts: &EvalOptions) -> Result<RetrievalReport> {
    if opts.ks.is_empty() {
        return Err(Error::InvalidArgument("K list is empty".into()));
    }
    for &k in &opts.ks {
        check_k(k, pool)?;
    }
    let outcomes = query_outcomes(queries, pool)?;
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.best_rank).collect();
    let recall_at = opts.ks.iter().map(|&k| (k, recall_from_ranks(&ranks, k))).collect();
    let edges = opts.histogram_edges.clone().unwrap_or_else(|| power_of_two_edges(pool.len()));
    let rank_histogram = RankHistogram::new(&ranks, edges, opts.rank_limit)?;
    let mean_gt_cosine = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.gt_cosine).sum::<f64>() / outcomes.len() as f64
    };
    let cosine_by_rank = cosine_by_rank(queries, pool, opts.cosine_max_rank.min(pool.len()))?;
    Ok(RetrievalReport {
        setting: pool.setting(),
        pool_size: pool.len(),
        n_queries: queries.len(),
        recall_at,
        rank_histogram,
        mean_gt_cosine,
        cosine_by_rank,
        queries: outcomes,
    })
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// One row per query: id, best rank, ground-truth cosine, hit flags.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,best_rank,gt_cosine");
        for k in self.recall_at.keys() {
            write!(out, ",hit@{k}").unwrap();
        }
        out.push('\n');
        for q in &self.queries {
            write!(out, "{},{},{}", q.id, q.best_rank, q.gt_cosine).unwrap();
            for &k in self.recall_at.keys() {
                write!(out, ",{}", u8::from(q.best_rank <= k)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
