//! First-stage retrieval over reviewed items.
//!
//! Monolithic late fusion scores every review against the full query vector
//! and averages the top `K_R` review scores per item. Aspect fusion repeats
//! that per extracted query aspect and aggregates the per-aspect results with
//! one of the [`Aggregator`]s.

mod aggregate;
mod merge;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{by_score_then_id, EmbedError, EmbeddingStore, ScoredReview};

pub use aggregate::{aggregate_row, aggregate_scores, Aggregator, SCORE_FLOOR};
pub use merge::{borda_merge, round_robin_merge};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("embedding store has no items")]
    EmptyStore,
    #[error("{name} must be at least 1, got {value}")]
    InvalidCutoff { name: &'static str, value: usize },
    #[error("aspect fusion needs at least one aspect vector")]
    NoAspects,
    #[error("aspect score matrix is empty")]
    EmptyMatrix,
    #[error("{0} is a rank aggregator, not a score aggregator")]
    NotScoreBased(Aggregator),
    #[error("invalid scored list: {0}")]
    InvalidList(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f64,
}

/// A ranked top-`k` item list: scores non-increasing, ties by item id
/// ascending, no repeated items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScoredList", into = "RawScoredList")]
pub struct ScoredList {
    k: usize,
    entries: Vec<ScoredItem>,
}

#[derive(Serialize, Deserialize)]
struct RawScoredList {
    k: usize,
    entries: Vec<ScoredItem>,
}

impl TryFrom<RawScoredList> for ScoredList {
    type Error = FusionError;

    fn try_from(raw: RawScoredList) -> Result<Self, FusionError> {
        ScoredList::new(raw.entries, raw.k)
    }
}

impl From<ScoredList> for RawScoredList {
    fn from(list: ScoredList) -> Self {
        RawScoredList {
            k: list.k,
            entries: list.entries,
        }
    }
}

impl ScoredList {
    /// Wraps already-ranked entries, checking every list invariant.
    pub fn new(entries: Vec<ScoredItem>, k: usize) -> Result<Self, FusionError> {
        if k == 0 {
            return Err(FusionError::InvalidCutoff {
                name: "K_I",
                value: k,
            });
        }
        if entries.len() > k {
            return Err(FusionError::InvalidList(format!(
                "{} entries exceed capacity {k}",
                entries.len()
            )));
        }
        for pair in entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if by_score_then_id(a.score, &a.item_id, b.score, &b.item_id).is_ge() {
                return Err(FusionError::InvalidList(format!(
                    "`{}` ({}) may not precede `{}` ({})",
                    a.item_id, a.score, b.item_id, b.score
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.item_id.as_str())) {
            return Err(FusionError::InvalidList(format!(
                "duplicate item `{}`",
                dup.item_id
            )));
        }
        Ok(Self { k, entries })
    }

    /// Ranks ids in the given order with positional scores `k - position`
    /// (position counted from 0).
    pub fn from_ranked_ids<S: Into<String>>(ids: impl IntoIterator<Item = S>, k: usize) -> Self {
        let entries = ids
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(pos, id)| ScoredItem {
                item_id: id.into(),
                score: (k - pos) as f64,
            })
            .collect();
        Self { k, entries }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[ScoredItem] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    /// 1-based rank of `item_id`, if listed.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.item_id == item_id)
            .map(|p| p + 1)
    }
}

/// Orders `scores` and keeps the best `k_i`.
pub fn rank_top_k(scores: &BTreeMap<String, f64>, k_i: usize) -> Result<ScoredList, FusionError> {
    if k_i == 0 {
        return Err(FusionError::InvalidCutoff {
            name: "K_I",
            value: 0,
        });
    }
    let mut entries: Vec<ScoredItem> = scores
        .iter()
        .map(|(id, &score)| ScoredItem {
            item_id: id.clone(),
            score,
        })
        .collect();
    // BTreeMap iteration is id-ascending; a stable sort on score keeps that
    // order among ties.
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    entries.truncate(k_i);
    Ok(ScoredList { k: k_i, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Monolithic,
    Aspect,
}

/// The reviews actually averaged for each item, one list per probe (the
/// query for monolithic fusion, each aspect in extraction order otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub kind: TraceKind,
    pub probe_ids: Vec<String>,
    pub k_r: usize,
    pub items: BTreeMap<String, Vec<Vec<ScoredReview>>>,
}

impl FusionTrace {
    /// Per-probe review lists of one item.
    pub fn reviews_for(&self, item_id: &str) -> Option<&[Vec<ScoredReview>]> {
        self.items.get(item_id).map(Vec::as_slice)
    }
}

/// A vector scored against reviews: the whole query or one extracted aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub id: String,
    pub vector: Vec<f32>,
}

impl Probe {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            vector,
        }
    }
}

fn check_k_r(k_r: usize) -> Result<(), FusionError> {
    if k_r == 0 {
        Err(FusionError::InvalidCutoff {
            name: "K_R",
            value: 0,
        })
    } else {
        Ok(())
    }
}

/// Late fusion: per item, the mean of its `min(K_R, R_i)` best review scores.
pub fn late_fusion(
    store: &EmbeddingStore,
    probe: &[f32],
    k_r: usize,
) -> Result<(BTreeMap<String, f64>, FusionTrace), FusionError> {
    check_k_r(k_r)?;
    if !store.item_ids().any(|_| true) {
        return Err(FusionError::EmptyStore);
    }
    store.check_probe(probe)?;
    let mut scores = BTreeMap::new();
    let mut items = BTreeMap::new();
    for (item_id, rows) in store.item_rows() {
        let top = store.score_rows(probe, rows, k_r);
        if top.is_empty() {
            // Items without reviews have nothing to fuse and are not ranked.
            continue;
        }
        let mean = top.iter().map(|r| r.score).sum::<f64>() / top.len() as f64;
        scores.insert(item_id.to_string(), mean);
        items.insert(item_id.to_string(), vec![top]);
    }
    let trace = FusionTrace {
        kind: TraceKind::Monolithic,
        probe_ids: vec!["query".to_string()],
        k_r,
        items,
    };
    Ok((scores, trace))
}

pub fn monolithic_lf(
    store: &EmbeddingStore,
    query_vec: &[f32],
    k_r: usize,
    k_i: usize,
) -> Result<(ScoredList, FusionTrace), FusionError> {
    let (scores, trace) = late_fusion(store, query_vec, k_r)?;
    Ok((rank_top_k(&scores, k_i)?, trace))
}

/// Aspect-item scores `S_{a,i}`, one row per aspect in extraction order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectScoreMatrix {
    pub aspect_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// `scores[a][i]` for aspect `a` and item `i`.
    pub scores: Vec<Vec<f64>>,
}

impl AspectScoreMatrix {
    pub fn row(&self, aspect: usize) -> &[f64] {
        &self.scores[aspect]
    }

    /// All aspect scores of the `item`-th item.
    pub fn column(&self, item: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[item]).collect()
    }

    /// Item scores for one aspect, keyed by item id.
    pub fn row_map(&self, aspect: usize) -> BTreeMap<String, f64> {
        self.item_ids
            .iter()
            .cloned()
            .zip(self.scores[aspect].iter().copied())
            .collect()
    }
}

pub fn aspect_item_scores(
    store: &EmbeddingStore,
    aspects: &[Probe],
    k_r: usize,
) -> Result<(AspectScoreMatrix, FusionTrace), FusionError> {
    if aspects.is_empty() {
        return Err(FusionError::NoAspects);
    }
    let mut rows = Vec::with_capacity(aspects.len());
    let mut items: BTreeMap<String, Vec<Vec<ScoredReview>>> = BTreeMap::new();
    let mut item_ids = Vec::new();
    for (idx, aspect) in aspects.iter().enumerate() {
        let (scores, trace) = late_fusion(store, &aspect.vector, k_r)?;
        if idx == 0 {
            item_ids = scores.keys().cloned().collect();
        }
        rows.push(scores.into_values().collect());
        for (item_id, mut lists) in trace.items {
            items.entry(item_id).or_default().append(&mut lists);
        }
    }
    let matrix = AspectScoreMatrix {
        aspect_ids: aspects.iter().map(|a| a.id.clone()).collect(),
        item_ids,
        scores: rows,
    };
    let trace = FusionTrace {
        kind: TraceKind::Aspect,
        probe_ids: matrix.aspect_ids.clone(),
        k_r,
        items,
    };
    Ok((matrix, trace))
}

/// Aspect fusion: late fusion per aspect, then aggregation into one list.
pub fn aspect_fusion(
    store: &EmbeddingStore,
    aspects: &[Probe],
    k_r: usize,
    k_i: usize,
    method: Aggregator,
) -> Result<(ScoredList, FusionTrace), FusionError> {
    if k_i == 0 {
        return Err(FusionError::InvalidCutoff {
            name: "K_I",
            value: 0,
        });
    }
    let (matrix, trace) = aspect_item_scores(store, aspects, k_r)?;
    let list = if method.is_score_based() {
        rank_top_k(&aggregate_scores(&matrix, method)?, k_i)?
    } else {
        let per_aspect = (0..matrix.aspect_ids.len())
            .map(|a| rank_top_k(&matrix.row_map(a), k_i))
            .collect::<Result<Vec<_>, _>>()?;
        match method {
            Aggregator::Borda => borda_merge(&per_aspect, k_i),
            Aggregator::RoundRobin => {
                let id_lists: Vec<Vec<&str>> =
                    per_aspect.iter().map(|l| l.ids().collect()).collect();
                ScoredList::from_ranked_ids(round_robin_merge(&id_lists, k_i), k_i)
            }
            _ => unreachable!("score aggregators handled above"),
        }
    };
    Ok((list, trace))
}
