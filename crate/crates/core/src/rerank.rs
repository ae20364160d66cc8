//! Second-stage reranking of a first-stage item list.
//!
//! Each candidate item is represented by a handful of its reviews, picked
//! from the fusion trace. A cross-encoder scores the concatenated reviews
//! against the query; a listwise model reorders the whole list at once.
//! Either way the result is a permutation of the first-stage items, and any
//! failure falls back to the first-stage list with a warning.

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::fusion::{rank_top_k, round_robin_merge, FusionTrace, ScoredList, TraceKind};
use crate::llm::{ItemReviews, LlmClient, LlmError};

/// Character budget of a cross-encoder passage unless configured otherwise.
pub const DEFAULT_PASSAGE_CHARS: usize = 4000;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("a {strategy:?} review selection needs a {expected:?} trace, got {actual:?}")]
    TraceMismatch {
        strategy: SelectStrategy,
        expected: TraceKind,
        actual: TraceKind,
    },
    #[error("K_R must be at least 1")]
    ZeroKr,
    #[error("item `{0}` has no selected reviews")]
    NoReviews(String),
    #[error("review `{0}` is not in the corpus")]
    UnknownReview(String),
    #[error("cross-encoder failed: {0}")]
    Scorer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectStrategy {
    Mono,
    Aspect,
}

/// The reviews that represent each traced item during reranking.
///
/// `Mono` keeps the item's top `k_r` reviews for the whole query. `Aspect`
/// interleaves the per-aspect top lists round-robin so every aspect is
/// represented, then keeps the first `k_r`.
pub fn select_reviews(
    trace: &FusionTrace,
    strategy: SelectStrategy,
    k_r: usize,
) -> Result<BTreeMap<String, Vec<String>>, RerankError> {
    if k_r == 0 {
        return Err(RerankError::ZeroKr);
    }
    let expected = match strategy {
        SelectStrategy::Mono => TraceKind::Monolithic,
        SelectStrategy::Aspect => TraceKind::Aspect,
    };
    if trace.kind != expected {
        return Err(RerankError::TraceMismatch {
            strategy,
            expected,
            actual: trace.kind,
        });
    }
    Ok(trace
        .items
        .iter()
        .map(|(item, per_probe)| {
            let lists: Vec<Vec<&str>> = per_probe
                .iter()
                .map(|l| l.iter().take(k_r).map(|r| r.review_id.as_str()).collect())
                .collect();
            let ids = match strategy {
                SelectStrategy::Mono => lists
                    .first()
                    .map(|l| l.iter().map(|s| s.to_string()).collect())
                    .unwrap_or_default(),
                SelectStrategy::Aspect => round_robin_merge(&lists, k_r),
            };
            (item.clone(), ids)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankInput {
    pub query_text: String,
    pub stage1: ScoredList,
    /// Review texts per stage-1 item, in selection order.
    pub reviews: BTreeMap<String, Vec<String>>,
}

impl RerankInput {
    pub fn new(
        query_text: impl Into<String>,
        stage1: ScoredList,
        reviews: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, RerankError> {
        if let Some(id) = stage1
            .ids()
            .find(|id| reviews.get(*id).is_none_or(|r| r.is_empty()))
        {
            return Err(RerankError::NoReviews(id.to_string()));
        }
        Ok(Self {
            query_text: query_text.into(),
            stage1,
            reviews,
        })
    }

    /// Looks up the texts of the selected review ids of each stage-1 item.
    pub fn from_selection(
        query_text: impl Into<String>,
        stage1: ScoredList,
        selection: &BTreeMap<String, Vec<String>>,
        corpus: &Corpus,
    ) -> Result<Self, RerankError> {
        let mut reviews = BTreeMap::new();
        for item in stage1.ids() {
            let texts = selection
                .get(item)
                .map(|ids| {
                    ids.iter()
                        .map(|id| {
                            corpus
                                .review(id)
                                .map(|r| r.text.clone())
                                .ok_or_else(|| RerankError::UnknownReview(id.clone()))
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?
                .unwrap_or_default();
            reviews.insert(item.to_string(), texts);
        }
        Self::new(query_text, stage1, reviews)
    }

    fn items(&self) -> Vec<ItemReviews> {
        self.stage1
            .ids()
            .map(|id| ItemReviews {
                item_id: id.to_string(),
                reviews: self.reviews[id].clone(),
            })
            .collect()
    }
}

/// A reranked list, or the stage-1 list plus the reason reranking failed.
#[derive(Debug)]
pub struct RerankOutcome {
    pub list: ScoredList,
    pub warning: Option<String>,
    /// Set when the failure came from an exhausted model endpoint.
    pub endpoint_exhausted: bool,
}

impl RerankOutcome {
    fn fallback(stage1: &ScoredList, warning: String, endpoint_exhausted: bool) -> Self {
        log::warn!("{warning}");
        Self {
            list: stage1.clone(),
            warning: Some(warning),
            endpoint_exhausted,
        }
    }
}

/// Scores (query, passage) pairs; one score per passage, in order.
pub trait CrossEncoder: Send + Sync {
    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, RerankError>;
}

/// Scores a passage by its length in characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct LengthCrossEncoder;

impl CrossEncoder for LengthCrossEncoder {
    fn score(&self, _query: &str, passages: &[String]) -> Result<Vec<f64>, RerankError> {
        Ok(passages.iter().map(|p| p.chars().count() as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossEncoderConfig {
    /// Root of a rerank service; `/rerank` is appended.
    pub base_url: String,
    pub model_name: String,
    pub timeout_secs: f64,
    pub passage_chars: usize,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            model_name: "cross-encoder/ms-marco-MiniLM-L-12-v2".into(),
            timeout_secs: 60.0,
            passage_chars: DEFAULT_PASSAGE_CHARS,
        }
    }
}

/// Cross-encoder served over HTTP. Requests are
/// `{"model", "query", "documents": [...]}` posted to `{base_url}/rerank`;
/// responses carry `{"results": [{"index", "relevance_score"}]}`.
pub struct HttpCrossEncoder {
    config: CrossEncoderConfig,
    agent: ureq::Agent,
}

impl HttpCrossEncoder {
    pub fn new(config: CrossEncoderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                config.timeout_secs.max(0.001),
            )))
            .build()
            .into();
        Self { config, agent }
    }
}

impl CrossEncoder for HttpCrossEncoder {
    fn score(&self, query: &str, passages: &[String]) -> Result<Vec<f64>, RerankError> {
        let url = format!("{}/rerank", self.config.base_url.trim_end_matches('/'));
        let body = json!({"model": self.config.model_name, "query": query, "documents": passages});
        let text = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| RerankError::Scorer(e.to_string()))?;
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| RerankError::Scorer(format!("{e}: {text}")))?;
        let mut scores = vec![None; passages.len()];
        for r in parsed["results"].as_array().into_iter().flatten() {
            let (Some(i), Some(s)) = (r["index"].as_u64(), r["relevance_score"].as_f64()) else {
                return Err(RerankError::Scorer(format!("malformed result {r}")));
            };
            if let Some(slot) = scores.get_mut(i as usize) {
                *slot = Some(s);
            }
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| RerankError::Scorer(format!("no score for passage {i}"))))
            .collect()
    }
}

/// Joins reviews with single spaces and keeps the first `budget` characters.
pub fn build_passage(reviews: &[String], budget: usize) -> String {
    reviews.join(" ").chars().take(budget).collect()
}

pub fn cross_encoder_rerank(
    ce: &dyn CrossEncoder,
    input: &RerankInput,
    passage_chars: usize,
) -> RerankOutcome {
    let ids: Vec<&str> = input.stage1.ids().collect();
    let passages: Vec<String> = ids
        .iter()
        .map(|id| build_passage(&input.reviews[*id], passage_chars))
        .collect();
    let scores = match ce.score(&input.query_text, &passages) {
        Ok(s) if s.len() == ids.len() && s.iter().all(|v| v.is_finite()) => s,
        Ok(s) => {
            return RerankOutcome::fallback(
                &input.stage1,
                format!(
                    "cross-encoder returned {} usable scores for {} items",
                    s.len(),
                    ids.len()
                ),
                false,
            )
        }
        Err(e) => return RerankOutcome::fallback(&input.stage1, e.to_string(), false),
    };
    let map: BTreeMap<String, f64> = ids.iter().map(|s| s.to_string()).zip(scores).collect();
    RerankOutcome {
        list: rank_top_k(&map, input.stage1.k()).expect("stage-1 capacity is at least 1"),
        warning: None,
        endpoint_exhausted: false,
    }
}

pub fn listwise_rerank(llm: &dyn LlmClient, input: &RerankInput) -> RerankOutcome {
    if input.stage1.is_empty() {
        return RerankOutcome {
            list: input.stage1.clone(),
            warning: None,
            endpoint_exhausted: false,
        };
    }
    match llm.rerank_listwise(&input.query_text, &input.items()) {
        Ok(emitted) => {
            let stage1: Vec<&str> = input.stage1.ids().collect();
            let order = repair_permutation(&emitted, &stage1);
            if order.len() != emitted.len() || order.iter().zip(&emitted).any(|(a, b)| a != b) {
                log::debug!("repaired listwise output {emitted:?} into {order:?}");
            }
            RerankOutcome {
                list: ScoredList::from_ranked_ids(order, input.stage1.k()),
                warning: None,
                endpoint_exhausted: false,
            }
        }
        Err(e) => {
            let exhausted = matches!(e, LlmError::Unreachable { .. });
            RerankOutcome::fallback(
                &input.stage1,
                format!("listwise rerank failed: {e}"),
                exhausted,
            )
        }
    }
}

/// Turns a model's emitted ids into a full permutation of `stage1`: known
/// ids in emitted order (first occurrence), then the rest in stage-1 order.
pub fn repair_permutation<A: AsRef<str>, B: AsRef<str>>(
    emitted: &[A],
    stage1: &[B],
) -> Vec<String> {
    let known: HashSet<&str> = stage1.iter().map(AsRef::as_ref).collect();
    let mut placed = HashSet::new();
    let mut out: Vec<String> = emitted
        .iter()
        .map(AsRef::as_ref)
        .filter(|id| known.contains(id) && placed.insert(*id))
        .map(str::to_string)
        .collect();
    out.extend(
        stage1
            .iter()
            .map(AsRef::as_ref)
            .filter(|id| !placed.contains(id))
            .map(str::to_string),
    );
    out
}
