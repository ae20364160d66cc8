//! Metrics, diagnostics and the experiment runner.

mod report;
mod runner;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::fusion::{FusionTrace, ScoredList};

pub use report::{Cell, CellStage, ExperimentReport, MARGIN_NOTE};
pub use runner::{
    aspect_probes, resolve_extracted_probes, run_experiment, AspectSource, Clients,
    ExperimentConfig, Method, ProbeError, RerankMode,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 values to estimate a margin, got {0}")]
    TooFewValues(usize),
    #[error("unknown aspect `{0}`")]
    UnknownAspect(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write report: {0}")]
    Csv(#[from] csv::Error),
}

/// Average precision at `k` with a single relevant item: `1/rank` when it
/// is ranked within `k`, else 0.
pub fn average_precision_at_k(list: &ScoredList, correct_item: &str, k: usize) -> f64 {
    match list.rank_of(correct_item) {
        Some(rank) if rank <= k => 1.0 / rank as f64,
        _ => 0.0,
    }
}

pub fn recall_at_k(list: &ScoredList, correct_item: &str, k: usize) -> f64 {
    match list.rank_of(correct_item) {
        Some(rank) if rank <= k => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub margin95: f64,
    pub n: usize,
}

/// Mean and 95% margin `1.96 * s / sqrt(n)`, with `s` the sample standard
/// deviation.
pub fn summarize(values: &[f64]) -> Result<(f64, f64), EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewValues(n));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok((mean, 1.96 * var.sqrt() / nf.sqrt()))
}

pub fn metric_summary(name: impl Into<String>, values: &[f64]) -> Result<MetricSummary, EvalError> {
    let (mean, margin95) = summarize(values)?;
    Ok(MetricSummary {
        name: name.into(),
        mean,
        margin95,
        n: values.len(),
    })
}

/// How well the reviews fused for an item represent the relevant aspects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of relevant aspects mentioned by at least one fused review.
    pub coverage: f64,
    /// Least over most frequent relevant aspect among fused reviews.
    pub balance: f64,
}

/// Coverage and balance of the fused reviews of every traced item.
///
/// The relevant aspects of an item are those of `relevant` it owns, or all of
/// its aspects when `relevant` is `None`. Items with no relevant aspect are
/// left out.
pub fn fusion_diagnostics(
    trace: &FusionTrace,
    corpus: &Corpus,
    relevant: Option<&[String]>,
) -> Result<BTreeMap<String, Diagnostics>, EvalError> {
    if let Some(ids) = relevant {
        if let Some(bad) = ids.iter().find(|a| corpus.aspect_owner(a).is_none()) {
            return Err(EvalError::UnknownAspect(bad.clone()));
        }
    }
    let mut out = BTreeMap::new();
    for (item_id, per_probe) in &trace.items {
        let Some(item) = corpus.item(item_id) else {
            continue;
        };
        let rel: Vec<&str> = match relevant {
            Some(ids) => ids
                .iter()
                .filter(|a| item.has_aspect(a))
                .map(String::as_str)
                .collect(),
            None => item.aspects.iter().map(|a| a.id.as_str()).collect(),
        };
        if rel.is_empty() {
            continue;
        }
        let fused: BTreeSet<&str> = per_probe
            .iter()
            .flatten()
            .map(|r| r.review_id.as_str())
            .collect();
        let freq: Vec<usize> = rel
            .iter()
            .map(|a| {
                fused
                    .iter()
                    .filter(|r| {
                        corpus
                            .review(r)
                            .is_some_and(|rv| rv.aspect_ids.contains(*a))
                    })
                    .count()
            })
            .collect();
        let covered = freq.iter().filter(|&&f| f > 0).count();
        let max = *freq.iter().max().unwrap_or(&0);
        let min = *freq.iter().min().unwrap_or(&0);
        let balance = if max == 0 {
            1.0
        } else {
            min as f64 / max as f64
        };
        out.insert(
            item_id.clone(),
            Diagnostics {
                coverage: covered as f64 / rel.len() as f64,
                balance,
            },
        );
    }
    Ok(out)
}

/// One query's ranked lists and where the correct item landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub correct_item_id: String,
    pub stage1: ScoredList,
    pub stage2: Option<ScoredList>,
    pub stage1_rank: Option<usize>,
    pub stage2_rank: Option<usize>,
}

impl QueryResult {
    pub fn new(
        query_id: impl Into<String>,
        correct_item_id: impl Into<String>,
        stage1: ScoredList,
        stage2: Option<ScoredList>,
    ) -> Self {
        let correct_item_id = correct_item_id.into();
        Self {
            query_id: query_id.into(),
            stage1_rank: stage1.rank_of(&correct_item_id),
            stage2_rank: stage2.as_ref().and_then(|l| l.rank_of(&correct_item_id)),
            correct_item_id,
            stage1,
            stage2,
        }
    }

    /// The final list: stage 2 when present.
    pub fn final_list(&self) -> &ScoredList {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }
}

/// Counts of (stage-1 rank, stage-2 rank) pairs for the correct item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub k_i: usize,
    /// `counts[r1 - 1][r2 - 1]`.
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
    /// Mean stage-1 and stage-2 rank over counted queries.
    pub center_of_mass: Option<(f64, f64)>,
    /// Share of counted queries whose rank improved (`r2 < r1`).
    pub improvement_fraction: Option<f64>,
}

impl TransitionMatrix {
    pub fn get(&self, r1: usize, r2: usize) -> u64 {
        self.counts[r1 - 1][r2 - 1]
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &c)| i == j || c == 0))
    }
}

/// Rank transitions over queries with the correct item in both lists.
pub fn rank_transition_matrix(results: &[QueryResult], k_i: usize) -> TransitionMatrix {
    let mut counts = vec![vec![0u64; k_i]; k_i];
    let (mut total, mut sum1, mut sum2, mut improved) = (0u64, 0usize, 0usize, 0u64);
    for r in results {
        if let (Some(r1), Some(r2)) = (r.stage1_rank, r.stage2_rank) {
            if r1 > k_i || r2 > k_i {
                continue;
            }
            counts[r1 - 1][r2 - 1] += 1;
            total += 1;
            sum1 += r1;
            sum2 += r2;
            improved += u64::from(r2 < r1);
        }
    }
    let t = total as f64;
    TransitionMatrix {
        k_i,
        counts,
        total,
        center_of_mass: (total > 0).then(|| (sum1 as f64 / t, sum2 as f64 / t)),
        improvement_fraction: (total > 0).then(|| improved as f64 / t),
    }
}
