//! Retrieval of reviewed items for multi-aspect queries.
//!
//! Items are described only through their reviews. [`fusion`] scores items by
//! late fusion of review scores, either against the whole query or against
//! each extracted query aspect with a choice of aggregator. [`rerank`] adds a
//! second stage, [`eval`] measures and reports, and [`distgen`] builds the
//! synthetic corpora used to study how review-aspect distributions affect
//! each method.

pub mod corpus;
pub mod distgen;
pub mod embedstore;
pub mod eval;
pub mod fusion;
pub mod llm;
pub mod rerank;

pub use corpus::{Aspect, Corpus, CorpusError, Item, Query, Review};
pub use distgen::{DistgenError, DistributionKind, GeometricBenchConfig};
pub use embedstore::{EmbedError, EmbeddingStore, ScoredReview};
pub use eval::{
    run_experiment, AspectSource, Clients, EvalError, ExperimentConfig, ExperimentReport, Method,
    MetricSummary, QueryResult, RerankMode,
};
pub use fusion::{
    aspect_fusion, monolithic_lf, Aggregator, AspectScoreMatrix, FusionError, FusionTrace, Probe,
    ScoredItem, ScoredList,
};
pub use llm::{ExtractedAspects, HttpLlm, LlmClient, LlmEndpointConfig, LlmError, MockLlm};
pub use rerank::{CrossEncoder, HttpCrossEncoder, LengthCrossEncoder, RerankError};
