//! Shared fixtures for the criterion benchmarks.

use aspectfuse_core::distgen::generate_geometric_bench;
use aspectfuse_core::{Corpus, DistributionKind, EmbeddingStore, GeometricBenchConfig, Probe};

/// A synthetic corpus with its embeddings and the aspect probes of the first
/// query.
pub struct Fixture {
    pub corpus: Corpus,
    pub store: EmbeddingStore,
    pub query: Vec<f32>,
    pub probes: Vec<Probe>,
}

pub fn fixture(n_items: usize, kind: DistributionKind) -> Fixture {
    let (corpus, store) = generate_geometric_bench(&GeometricBenchConfig {
        n_items,
        kind,
        seed: 1,
        ..Default::default()
    })
    .expect("bench generation");
    let q = corpus.queries().next().expect("a query").clone();
    let query = store.vector(&q.id).expect("query vector").to_vec();
    let probes = q
        .gt_aspects
        .iter()
        .map(|a| {
            Probe::new(
                a.id.clone(),
                store.vector(&a.id).expect("aspect vector").to_vec(),
            )
        })
        .collect();
    Fixture {
        corpus,
        store,
        query,
        probes,
    }
}
