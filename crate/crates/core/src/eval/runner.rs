use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::{Cell, CellStage, ExperimentReport};
use super::{
    average_precision_at_k, fusion_diagnostics, metric_summary, rank_transition_matrix,
    recall_at_k, EvalError, MetricSummary, QueryResult,
};
use crate::corpus::{Corpus, Query};
use crate::embedstore::EmbeddingStore;
use crate::fusion::{aspect_fusion, monolithic_lf, Aggregator, Probe};
use crate::llm::{ExtractedAspects, LlmClient, LlmError};
use crate::rerank::{
    cross_encoder_rerank, listwise_rerank, select_reviews, CrossEncoder, RerankInput,
    SelectStrategy, DEFAULT_PASSAGE_CHARS,
};

/// A first-stage retrieval method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    MonoLf,
    Af(Aggregator),
}

impl Method {
    /// Monolithic LF followed by aspect fusion with every aggregator.
    pub fn all() -> Vec<Method> {
        std::iter::once(Method::MonoLf)
            .chain(Aggregator::ALL.iter().map(|&a| Method::Af(a)))
            .collect()
    }

    /// Short name used in CSV output.
    pub fn family(self) -> &'static str {
        match self {
            Method::MonoLf => "mono_lf",
            Method::Af(_) => "af",
        }
    }

    pub fn aggregator(self) -> Option<Aggregator> {
        match self {
            Method::MonoLf => None,
            Method::Af(a) => Some(a),
        }
    }

    /// Row label in formatted tables.
    pub fn label(self) -> String {
        match self {
            Method::MonoLf => "Mono LF".to_string(),
            Method::Af(a) => a.label().to_string(),
        }
    }

    fn strategy(self) -> SelectStrategy {
        match self {
            Method::MonoLf => SelectStrategy::Mono,
            Method::Af(_) => SelectStrategy::Aspect,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::MonoLf => f.write_str("mono"),
            Method::Af(a) => write!(f, "af:{a}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    /// Accepts `mono`, `mono_lf`, `af:<aggregator>` and `af-<aggregator>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if matches!(lower.as_str(), "mono" | "mono_lf" | "mono-lf" | "monolf") {
            return Ok(Method::MonoLf);
        }
        let agg = lower
            .strip_prefix("af:")
            .or_else(|| lower.strip_prefix("af-"))
            .ok_or_else(|| format!("unknown method `{s}`; expected `mono` or `af:<aggregator>`"))?;
        agg.parse().map(Method::Af).map_err(|e| format!("{e}"))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where aspect-fusion probes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AspectSource {
    /// The ground-truth query aspects.
    #[default]
    Gt,
    /// Spans returned by the language model's extraction step.
    Extracted,
    /// The whole query as its only aspect.
    WholeQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    #[default]
    None,
    Ce,
    Listwise,
}

impl RerankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RerankMode::None => "none",
            RerankMode::Ce => "ce",
            RerankMode::Listwise => "listwise",
        }
    }
}

impl FromStr for RerankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(RerankMode::None),
            "ce" | "cross-encoder" => Ok(RerankMode::Ce),
            "listwise" | "llm" => Ok(RerankMode::Listwise),
            _ => Err(format!(
                "unknown rerank mode `{s}`; expected none, ce or listwise"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label for the dataset column of the report.
    pub dataset: String,
    pub aspect_source: AspectSource,
    pub methods: Vec<Method>,
    pub k_r: Vec<usize>,
    pub k_i: usize,
    /// Metric cutoff; defaults to `k_i`.
    pub metric_k: Option<usize>,
    pub rerank: RerankMode,
    pub passage_chars: usize,
    pub seed: u64,
    /// Skip queries whose correct item has fewer than two aspects.
    pub multi_aspect_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset".to_string(),
            aspect_source: AspectSource::Gt,
            methods: Method::all(),
            k_r: vec![1, 2, 5, 10, 15, 30],
            k_i: 10,
            metric_k: None,
            rerank: RerankMode::None,
            passage_chars: DEFAULT_PASSAGE_CHARS,
            seed: 7,
            multi_aspect_only: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.k_r.is_empty() {
            return bad("k_r grid must not be empty".into());
        }
        if self.k_r.contains(&0) {
            return bad("k_r values must be at least 1".into());
        }
        if self.k_i == 0 {
            return bad("k_i must be at least 1".into());
        }
        if self.metric_k.is_some_and(|k| k == 0 || k > self.k_i) {
            return bad(format!("metric_k must be in 1..={}", self.k_i));
        }
        if self.passage_chars == 0 {
            return bad("passage_chars must be at least 1".into());
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return bad("methods contain duplicates".into());
        }
        if self.k_r.iter().collect::<BTreeSet<_>>().len() != self.k_r.len() {
            return bad("k_r grid contains duplicates".into());
        }
        Ok(())
    }

    pub fn metric_k(&self) -> usize {
        self.metric_k.unwrap_or(self.k_i)
    }
}

/// Model-backed collaborators of an experiment.
#[derive(Clone, Copy)]
pub struct Clients<'a> {
    pub llm: &'a dyn LlmClient,
    pub cross_encoder: &'a dyn CrossEncoder,
}

/// Probes for one query, or why they could not be built.
struct Prepared<'a> {
    query: &'a Query,
    query_vec: Result<Vec<f32>, String>,
    aspects: Result<Vec<Probe>, String>,
    extraction: Option<ExtractedAspects>,
    exhausted: bool,
}

struct QueryOutcome {
    result: QueryResult,
    diagnostics: Option<(f64, f64)>,
    warning: Option<String>,
    exhausted: bool,
}

/// Vectors for extracted spans: the stored `<query>::x<j>` vector, else the
/// ground-truth aspect with the same text, else the mean of ground-truth
/// aspects whose text occurs inside the span.
pub fn resolve_extracted_probes(
    query: &Query,
    extraction: &ExtractedAspects,
    store: &EmbeddingStore,
) -> Result<Vec<Probe>, String> {
    let norm = |s: &str| s.trim().to_lowercase();
    let mut probes = Vec::with_capacity(extraction.spans.len());
    for (j, span) in extraction.spans.iter().enumerate() {
        let id = format!("{}::x{j}", query.id);
        if let Some(v) = store.vector(&id) {
            probes.push(Probe::new(id, v.to_vec()));
            continue;
        }
        let text = norm(&span.text);
        if let Some(gt) = query.gt_aspects.iter().find(|a| norm(&a.text) == text) {
            let v = store
                .vector(&gt.id)
                .ok_or_else(|| format!("no vector for aspect `{}`", gt.id))?;
            probes.push(Probe::new(id, v.to_vec()));
            continue;
        }
        let inside: Vec<&[f32]> = query
            .gt_aspects
            .iter()
            .filter(|a| text.contains(&norm(&a.text)))
            .filter_map(|a| store.vector(&a.id))
            .collect();
        if inside.is_empty() {
            return Err(format!("no vector for extracted span `{}`", span.text));
        }
        let mut mean = vec![0f32; store.dim()];
        for v in &inside {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x / inside.len() as f32;
            }
        }
        probes.push(Probe::new(id, mean));
    }
    Ok(probes)
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no vector for `{0}`")]
    MissingVector(String),
    #[error("aspect extraction failed: {0}")]
    Extraction(#[from] LlmError),
    #[error("{0}")]
    Unresolved(String),
}

impl ProbeError {
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, ProbeError::Extraction(e) if e.is_exhaustion())
    }
}

/// Aspect probes of `query` from `source`, plus the extraction when the
/// language model was asked.
pub fn aspect_probes(
    query: &Query,
    source: AspectSource,
    store: &EmbeddingStore,
    llm: &dyn LlmClient,
) -> Result<(Vec<Probe>, Option<ExtractedAspects>), ProbeError> {
    let lookup = |id: &str| {
        store
            .vector(id)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| ProbeError::MissingVector(id.to_string()))
    };
    match source {
        AspectSource::Gt => {
            let probes = query
                .gt_aspects
                .iter()
                .map(|a| Ok(Probe::new(a.id.clone(), lookup(&a.id)?)))
                .collect::<Result<_, ProbeError>>()?;
            Ok((probes, None))
        }
        AspectSource::WholeQuery => {
            Ok((vec![Probe::new(query.id.clone(), lookup(&query.id)?)], None))
        }
        AspectSource::Extracted => {
            let ex = llm.extract_aspects(&query.id, &query.text)?;
            let probes =
                resolve_extracted_probes(query, &ex, store).map_err(ProbeError::Unresolved)?;
            Ok((probes, Some(ex)))
        }
    }
}

fn prepare<'a>(
    query: &'a Query,
    config: &ExperimentConfig,
    store: &EmbeddingStore,
    llm: &dyn LlmClient,
    needs_aspects: bool,
) -> Prepared<'a> {
    let query_vec = store
        .vector(&query.id)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| format!("no vector for query `{}`", query.id));
    let (aspects, extraction, exhausted) = if needs_aspects {
        match aspect_probes(query, config.aspect_source, store, llm) {
            Ok((probes, ex)) => (Ok(probes), ex, false),
            Err(e) => (Err(e.to_string()), None, e.is_exhaustion()),
        }
    } else {
        (Err("aspects not prepared".to_string()), None, false)
    };
    Prepared {
        query,
        query_vec,
        aspects,
        extraction,
        exhausted,
    }
}

fn run_query(
    p: &Prepared<'_>,
    method: Method,
    k_r: usize,
    config: &ExperimentConfig,
    corpus: &Corpus,
    store: &EmbeddingStore,
    clients: Clients<'_>,
) -> Result<QueryOutcome, (String, bool)> {
    let (stage1, trace) = match method {
        Method::MonoLf => {
            let v = p.query_vec.as_ref().map_err(|e| (e.clone(), false))?;
            monolithic_lf(store, v, k_r, config.k_i)
        }
        Method::Af(agg) => {
            let probes = p.aspects.as_ref().map_err(|e| (e.clone(), p.exhausted))?;
            aspect_fusion(store, probes, k_r, config.k_i, agg)
        }
    }
    .map_err(|e| (e.to_string(), false))?;

    let correct = &p.query.correct_item_id;
    let diagnostics = match trace.reviews_for(correct) {
        Some(_) => fusion_diagnostics(&trace, corpus, None)
            .map_err(|e| (e.to_string(), false))?
            .get(correct)
            .map(|d| (d.coverage, d.balance)),
        None => None,
    };

    let (stage2, warning, exhausted) = match config.rerank {
        RerankMode::None => (None, None, false),
        mode => {
            let selection = select_reviews(&trace, method.strategy(), k_r)
                .map_err(|e| (e.to_string(), false))?;
            let input =
                RerankInput::from_selection(&p.query.text, stage1.clone(), &selection, corpus)
                    .map_err(|e| (e.to_string(), false))?;
            let outcome = if mode == RerankMode::Ce {
                cross_encoder_rerank(clients.cross_encoder, &input, config.passage_chars)
            } else {
                listwise_rerank(clients.llm, &input)
            };
            (
                Some(outcome.list),
                outcome.warning,
                outcome.endpoint_exhausted,
            )
        }
    };
    Ok(QueryOutcome {
        result: QueryResult::new(&p.query.id, correct, stage1, stage2),
        diagnostics,
        warning: warning.map(|w| format!("{}: {w}", p.query.id)),
        exhausted,
    })
}

fn summaries(
    names: [&str; 2],
    results: &[QueryResult],
    k: usize,
    stage: CellStage,
) -> Result<Vec<MetricSummary>, EvalError> {
    let list = |r: &QueryResult| match stage {
        CellStage::Stage1 => r.stage1.clone(),
        CellStage::Stage2 => r.final_list().clone(),
    };
    let ap: Vec<f64> = results
        .iter()
        .map(|r| average_precision_at_k(&list(r), &r.correct_item_id, k))
        .collect();
    let re: Vec<f64> = results
        .iter()
        .map(|r| recall_at_k(&list(r), &r.correct_item_id, k))
        .collect();
    Ok(vec![
        metric_summary(names[0], &ap)?,
        metric_summary(names[1], &re)?,
    ])
}

fn run_cell(
    prepared: &[Prepared<'_>],
    method: Method,
    k_r: usize,
    config: &ExperimentConfig,
    corpus: &Corpus,
    store: &EmbeddingStore,
    clients: Clients<'_>,
) -> Cell {
    let mut cell = Cell::empty(method, k_r);
    let outcomes: Vec<Result<QueryOutcome, (String, bool)>> = prepared
        .par_iter()
        .map(|p| run_query(p, method, k_r, config, corpus, store, clients))
        .collect();
    let mut ok = Vec::with_capacity(outcomes.len());
    for (p, outcome) in prepared.iter().zip(outcomes) {
        match outcome {
            Ok(o) => ok.push(o),
            Err((msg, exhausted)) => {
                cell.endpoint_exhausted |= exhausted;
                if cell.failure.is_none() {
                    cell.failure = Some(format!("query `{}`: {msg}", p.query.id));
                }
            }
        }
    }
    for o in &ok {
        cell.endpoint_exhausted |= o.exhausted;
        cell.warnings.extend(o.warning.clone());
    }
    cell.results = ok.iter().map(|o| o.result.clone()).collect();
    if cell.failure.is_some() {
        cell.results.clear();
        return cell;
    }
    let k = config.metric_k();
    let names = [format!("MAP@{k}"), format!("Re@{k}")];
    let names = [names[0].as_str(), names[1].as_str()];
    let mut stage1 = match summaries(names, &cell.results, k, CellStage::Stage1) {
        Ok(s) => s,
        Err(e) => {
            cell.failure = Some(e.to_string());
            return cell;
        }
    };
    let diags: Vec<(f64, f64)> = ok.iter().filter_map(|o| o.diagnostics).collect();
    if diags.len() >= 2 {
        let cov: Vec<f64> = diags.iter().map(|d| d.0).collect();
        let bal: Vec<f64> = diags.iter().map(|d| d.1).collect();
        stage1.extend(metric_summary("Coverage", &cov));
        stage1.extend(metric_summary("Balance", &bal));
    }
    cell.stage1 = stage1;
    if config.rerank != RerankMode::None {
        cell.stage2 = summaries(names, &cell.results, k, CellStage::Stage2).unwrap_or_default();
        cell.transitions = Some(rank_transition_matrix(&cell.results, config.k_i));
    }
    cell
}

/// Runs every (method, K_R) cell over the selected queries.
///
/// Queries are evaluated in parallel on the current rayon pool and merged
/// in query-id order. A failing query marks its cell failed; other cells
/// still run.
pub fn run_experiment(
    config: &ExperimentConfig,
    corpus: &Corpus,
    store: &EmbeddingStore,
    clients: Clients<'_>,
) -> Result<ExperimentReport, EvalError> {
    config.validate()?;
    let queries: Vec<&Query> = if config.multi_aspect_only {
        corpus.multi_aspect_queries().collect()
    } else {
        corpus.queries().collect()
    };
    let needs_aspects = config.methods.iter().any(|m| matches!(m, Method::Af(_)));
    let prepared: Vec<Prepared<'_>> = queries
        .par_iter()
        .map(|q| prepare(q, config, store, clients.llm, needs_aspects))
        .collect();

    let mut cells = Vec::with_capacity(config.methods.len() * config.k_r.len());
    for &method in &config.methods {
        for &k_r in &config.k_r {
            let cell = run_cell(&prepared, method, k_r, config, corpus, store, clients);
            if let Some(f) = &cell.failure {
                log::warn!("cell {method} K_R={k_r} failed: {f}");
            }
            cells.push(cell);
        }
    }
    let extractions: BTreeMap<String, ExtractedAspects> = prepared
        .iter()
        .filter_map(|p| p.extraction.clone().map(|e| (p.query.id.clone(), e)))
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        n_queries: queries.len(),
        cells,
        extractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_strings_round_trip() {
        for m in Method::all() {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!(
            "af-rr".parse::<Method>().unwrap(),
            Method::Af(Aggregator::RoundRobin)
        );
        assert_eq!("Mono_LF".parse::<Method>().unwrap(), Method::MonoLf);
        assert!("af:median".parse::<Method>().is_err());
        assert!("bm25".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let with = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate()
        };
        assert!(with(|c| c.k_r = vec![0, 1]).is_err());
        assert!(with(|c| c.k_r.clear()).is_err());
        assert!(with(|c| c.k_i = 0).is_err());
        assert!(with(|c| c.metric_k = Some(11)).is_err());
        assert!(with(|c| c.methods = vec![Method::MonoLf, Method::MonoLf]).is_err());
        assert!(with(|c| c.k_r = vec![1, 1]).is_err());
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"methods":["mono","af:gmean"],"rerank":"ce"}"#).unwrap();
        assert_eq!(
            c.methods,
            vec![Method::MonoLf, Method::Af(Aggregator::GMean)]
        );
        assert_eq!(c.k_r, vec![1, 2, 5, 10, 15, 30]);
        assert_eq!(c.rerank, RerankMode::Ce);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"kr":[1]}"#).is_err());
    }
}
