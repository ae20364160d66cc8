//! Synthetic review corpora.
//!
//! [`generate_reviews`] writes reviews for labelled items under one of four
//! review-aspect distributions. [`generate_geometric_bench`] goes further and
//! builds a whole corpus with embeddings drawn directly in vector space, so
//! the effect of each distribution on retrieval can be studied without any
//! text encoder.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{aspect_id, Aspect, Corpus, CorpusError, Item, Query, Review};
use crate::embedstore::{EmbedError, EmbeddingStore};
use crate::llm::{LlmClient, LlmError, MockLlm, ReviewStyle};

/// Reviews per item in an overlapping corpus built from item labels.
pub const OVERLAPPING_REVIEWS_PER_ITEM: usize = 20;
/// Reviews per aspect in a disjoint corpus built from item labels.
pub const DISJOINT_REVIEWS_PER_ASPECT: usize = 10;

#[derive(Debug, Error)]
pub enum DistgenError {
    #[error("review text for item `{item}`{}: {source}", aspect.as_ref().map(|a| format!(", aspect `{a}`")).unwrap_or_default())]
    Text {
        item: String,
        aspect: Option<String>,
        #[source]
        source: LlmError,
    },
    #[error("review `{0}` mentions more than one aspect; imbalance needs disjoint reviews")]
    NotDisjoint(String),
    #[error("{0} is not a frequency-imbalance distribution")]
    NotImbalance(DistributionKind),
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    /// Every review mentions every aspect of its item.
    FullyOverlapping,
    /// Every review mentions exactly one aspect, all aspects equally often.
    #[default]
    FullyDisjoint,
    /// Disjoint, with one aspect per item cut down to a single review.
    #[serde(alias = "one-rare")]
    OneRareAspect,
    /// Disjoint, with every aspect but one cut down to a single review.
    #[serde(alias = "one-popular")]
    OnePopularAspect,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 4] = [
        DistributionKind::FullyOverlapping,
        DistributionKind::FullyDisjoint,
        DistributionKind::OneRareAspect,
        DistributionKind::OnePopularAspect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistributionKind::FullyOverlapping => "fully-overlapping",
            DistributionKind::FullyDisjoint => "fully-disjoint",
            DistributionKind::OneRareAspect => "one-rare-aspect",
            DistributionKind::OnePopularAspect => "one-popular-aspect",
        }
    }

    pub fn is_imbalanced(self) -> bool {
        matches!(
            self,
            DistributionKind::OneRareAspect | DistributionKind::OnePopularAspect
        )
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown distribution `{0}` (expected fully-overlapping, fully-disjoint, one-rare or one-popular)")]
pub struct ParseKindError(String);

impl FromStr for DistributionKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fully-overlapping" | "overlapping" => Ok(DistributionKind::FullyOverlapping),
            "fully-disjoint" | "disjoint" => Ok(DistributionKind::FullyDisjoint),
            "one-rare-aspect" | "one-rare" => Ok(DistributionKind::OneRareAspect),
            "one-popular-aspect" | "one-popular" => Ok(DistributionKind::OnePopularAspect),
            _ => Err(ParseKindError(s.to_string())),
        }
    }
}

/// Derives an independent seed for the named stream of a run.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed with a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}

fn review_id(item_id: &str, k: usize) -> String {
    format!("{item_id}::r{k:03}")
}

/// Reviews for `items` under `kind`.
///
/// `reviews_per_unit` counts reviews per item for overlapping corpora and
/// per aspect otherwise. Imbalanced kinds are generated disjoint and then
/// thinned with [`apply_frequency_imbalance`].
pub fn generate_reviews(
    items: &[Item],
    kind: DistributionKind,
    reviews_per_unit: usize,
    text_source: &dyn LlmClient,
    seed: u64,
) -> Result<Vec<Review>, DistgenError> {
    let mut nonces = rng_for(seed, "nonce");
    let mut reviews = Vec::new();
    for item in items {
        let mut k = 0;
        let mut emit = |aspects: &[&Aspect], style, nonces: &mut ChaCha8Rng| {
            let texts: Vec<&str> = aspects.iter().map(|a| a.text.as_str()).collect();
            let nonce = nonces.random_range(0..1_000_000u64);
            let text = text_source
                .generate_review_text(&item.id, &texts, style, nonce)
                .map_err(|source| DistgenError::Text {
                    item: item.id.clone(),
                    aspect: (style == ReviewStyle::Disjoint).then(|| aspects[0].id.clone()),
                    source,
                })?;
            reviews.push(Review {
                id: review_id(&item.id, k),
                item_id: item.id.clone(),
                text,
                aspect_ids: aspects.iter().map(|a| a.id.clone()).collect(),
            });
            k += 1;
            Ok::<(), DistgenError>(())
        };
        match kind {
            DistributionKind::FullyOverlapping => {
                let all: Vec<&Aspect> = item.aspects.iter().collect();
                for _ in 0..reviews_per_unit {
                    emit(&all, ReviewStyle::Overlapping, &mut nonces)?;
                }
            }
            _ => {
                for aspect in &item.aspects {
                    for _ in 0..reviews_per_unit {
                        emit(&[aspect], ReviewStyle::Disjoint, &mut nonces)?;
                    }
                }
            }
        }
    }
    if kind.is_imbalanced() {
        reviews = apply_frequency_imbalance(&reviews, kind, sub_seed(seed, "imbalance"))?;
    }
    Ok(reviews)
}

/// Thins a disjoint review set: per item, one uniformly chosen aspect keeps a
/// single review (`OneRareAspect`) or is the only one to keep all of them
/// (`OnePopularAspect`). Kept reviews are the first by id; order and content
/// are untouched.
pub fn apply_frequency_imbalance(
    disjoint_reviews: &[Review],
    kind: DistributionKind,
    seed: u64,
) -> Result<Vec<Review>, DistgenError> {
    if !kind.is_imbalanced() {
        return Err(DistgenError::NotImbalance(kind));
    }
    let mut by_item: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for review in disjoint_reviews {
        let mut aspects = review.aspect_ids.iter();
        let (Some(aspect), None) = (aspects.next(), aspects.next()) else {
            return Err(DistgenError::NotDisjoint(review.id.clone()));
        };
        by_item
            .entry(&review.item_id)
            .or_default()
            .entry(aspect)
            .or_default()
            .push(&review.id);
    }
    let mut keep: HashSet<&str> = HashSet::new();
    for (item, aspects) in &by_item {
        let mut rng = rng_for(seed, item);
        let chosen = rng.random_range(0..aspects.len());
        for (j, ids) in aspects.values().enumerate() {
            let mut ids = ids.clone();
            ids.sort_unstable();
            let keep_all = match kind {
                _ if aspects.len() == 1 => true,
                DistributionKind::OneRareAspect => j != chosen,
                _ => j == chosen,
            };
            let n = if keep_all { ids.len() } else { 1 };
            keep.extend(ids.into_iter().take(n));
        }
    }
    Ok(disjoint_reviews
        .iter()
        .filter(|r| keep.contains(r.id.as_str()))
        .cloned()
        .collect())
}

/// Parameters of a corpus drawn directly in embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricBenchConfig {
    pub n_items: usize,
    pub aspects_per_item: usize,
    pub dim: usize,
    /// Reviews per aspect; overlapping items get this many per aspect in
    /// total, so review counts match across distributions.
    pub reviews_per_aspect: usize,
    /// Per-coordinate standard deviation of review noise.
    pub review_noise: f64,
    /// Per-coordinate standard deviation of query and query-aspect noise.
    pub query_noise: f64,
    /// Cosine between an item aspect direction and the shared concept it is
    /// drawn around; items sharing a concept are distractors for each other.
    pub distractor_similarity: f64,
    /// Size of the shared concept pool aspects are drawn from.
    pub n_concepts: usize,
    pub kind: DistributionKind,
    pub seed: u64,
}

impl Default for GeometricBenchConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            aspects_per_item: 3,
            dim: 64,
            reviews_per_aspect: 10,
            review_noise: 0.1,
            query_noise: 0.3,
            distractor_similarity: 0.5,
            n_concepts: 12,
            kind: DistributionKind::FullyDisjoint,
            seed: 7,
        }
    }
}

impl GeometricBenchConfig {
    pub fn validate(&self) -> Result<(), DistgenError> {
        let fail = |m: String| Err(DistgenError::Config(m));
        if self.n_items == 0 || self.aspects_per_item == 0 || self.reviews_per_aspect == 0 {
            return fail(
                "n_items, aspects_per_item and reviews_per_aspect must be at least 1".into(),
            );
        }
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.aspects_per_item > self.dim {
            return fail(format!(
                "{} orthonormal aspect directions do not fit in dim {}",
                self.aspects_per_item, self.dim
            ));
        }
        if !(self.review_noise >= 0.0 && self.query_noise >= 0.0)
            || !self.review_noise.is_finite()
            || !self.query_noise.is_finite()
        {
            return fail("noise levels must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.distractor_similarity) {
            return fail(format!(
                "distractor_similarity must lie in [0, 1), got {}",
                self.distractor_similarity
            ));
        }
        if self.n_concepts < self.aspects_per_item {
            return fail(format!(
                "n_concepts ({}) must be at least aspects_per_item ({})",
                self.n_concepts, self.aspects_per_item
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Orthonormalizes `vectors` in order (modified Gram-Schmidt).
fn gram_schmidt(vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for mut v in vectors {
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        basis.push(unit(v));
    }
    basis
}

fn add_noise(base: &[f64], rng: &mut ChaCha8Rng, scale: f64) -> Vec<f32> {
    base.iter()
        .map(|x| (x + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

fn mean_direction(dirs: &[Vec<f64>]) -> Vec<f64> {
    let dim = dirs[0].len();
    unit((0..dim).map(|d| dirs.iter().map(|v| v[d]).sum()).collect())
}

/// Text of the `j`-th aspect of item `item_id`.
pub fn bench_aspect_text(item_id: &str, j: usize) -> String {
    format!("feature {item_id}a{j}")
}

/// "Recipe with A", "Recipe with A and B", "Recipe with A, B and C", ...
fn query_text(aspects: &[String]) -> String {
    match aspects {
        [] => "Recipe".into(),
        [only] => format!("Recipe with {only}"),
        [init @ .., last] => format!("Recipe with {} and {last}", init.join(", ")),
    }
}

/// Draws a complete corpus and its embeddings.
///
/// Each item's aspect directions start near a concept from a shared pool
/// (cosine `distractor_similarity`) and are then orthonormalized within the
/// item. A disjoint review is its aspect's direction plus noise; an
/// overlapping review is the normalized mean of the item's directions plus
/// noise. Item `n` gets query `q{n}` whose vector is the normalized mean of
/// the item's directions plus noise, with one ground-truth aspect per item
/// aspect whose vector is that direction plus noise.
pub fn generate_geometric_bench(
    config: &GeometricBenchConfig,
) -> Result<(Corpus, EmbeddingStore), DistgenError> {
    config.validate()?;
    let seed = config.seed;
    let dim = config.dim;
    let s = config.distractor_similarity;
    let width = config.n_items.saturating_sub(1).to_string().len().max(3);

    let mut concept_rng = rng_for(seed, "concepts");
    let concepts: Vec<Vec<f64>> = (0..config.n_concepts)
        .map(|_| unit(gaussian(&mut concept_rng, dim, 1.0)))
        .collect();

    let mut dir_rng = rng_for(seed, "directions");
    let mut review_rng = rng_for(seed, "reviews");
    let mut query_rng = rng_for(seed, "queries");
    let mut nonce_rng = rng_for(seed, "nonce");

    let mut items = Vec::with_capacity(config.n_items);
    let mut reviews = Vec::new();
    let mut queries = Vec::with_capacity(config.n_items);
    let mut vectors: Vec<(String, Vec<f32>)> = Vec::new();

    for n in 0..config.n_items {
        let item_id = format!("i{n:0width$}");
        let picks =
            rand::seq::index::sample(&mut dir_rng, config.n_concepts, config.aspects_per_item);
        let raw: Vec<Vec<f64>> = picks
            .iter()
            .map(|c| {
                let private = unit(gaussian(&mut dir_rng, dim, 1.0));
                concepts[c]
                    .iter()
                    .zip(&private)
                    .map(|(x, y)| s.sqrt() * x + (1.0 - s).sqrt() * y)
                    .collect()
            })
            .collect();
        let dirs = gram_schmidt(raw);
        let aspects: Vec<Aspect> = (0..config.aspects_per_item)
            .map(|j| Aspect::new(aspect_id(&item_id, j), bench_aspect_text(&item_id, j)))
            .collect();

        let mut k = 0;
        let mut push_review = |aspect_idx: &[usize], base: &[f64], rng: &mut ChaCha8Rng| {
            let texts: Vec<&str> = aspect_idx
                .iter()
                .map(|&j| aspects[j].text.as_str())
                .collect();
            let style = if aspect_idx.len() == 1 {
                ReviewStyle::Disjoint
            } else {
                ReviewStyle::Overlapping
            };
            let nonce = nonce_rng.random_range(0..1_000_000u64);
            let text = MockLlm
                .generate_review_text(&item_id, &texts, style, nonce)
                .expect("mock review text");
            let id = review_id(&item_id, k);
            k += 1;
            vectors.push((id.clone(), add_noise(base, rng, config.review_noise)));
            reviews.push(Review {
                id,
                item_id: item_id.clone(),
                text,
                aspect_ids: aspect_idx
                    .iter()
                    .map(|&j| aspects[j].id.clone())
                    .collect::<BTreeSet<_>>(),
            });
        };
        let centroid = mean_direction(&dirs);
        if config.kind == DistributionKind::FullyOverlapping {
            let all: Vec<usize> = (0..config.aspects_per_item).collect();
            for _ in 0..config.reviews_per_aspect * config.aspects_per_item {
                push_review(&all, &centroid, &mut review_rng);
            }
        } else {
            for (j, dir) in dirs.iter().enumerate() {
                for _ in 0..config.reviews_per_aspect {
                    push_review(&[j], dir, &mut review_rng);
                }
            }
        }

        let query_id = format!("q{n:0width$}");
        let gt: Vec<Aspect> = aspects
            .iter()
            .enumerate()
            .map(|(j, a)| Aspect::new(aspect_id(&query_id, j), a.text.clone()))
            .collect();
        vectors.push((
            query_id.clone(),
            add_noise(&centroid, &mut query_rng, config.query_noise),
        ));
        for (a, dir) in gt.iter().zip(&dirs) {
            vectors.push((
                a.id.clone(),
                add_noise(dir, &mut query_rng, config.query_noise),
            ));
        }
        queries.push(Query {
            id: query_id,
            text: query_text(&aspects.iter().map(|a| a.text.clone()).collect::<Vec<_>>()),
            gt_aspects: gt,
            correct_item_id: item_id.clone(),
        });
        items.push(Item {
            id: item_id,
            aspects,
        });
    }

    if config.kind.is_imbalanced() {
        reviews = apply_frequency_imbalance(&reviews, config.kind, sub_seed(seed, "imbalance"))?;
        let kept: HashSet<&str> = reviews.iter().map(|r| r.id.as_str()).collect();
        let is_review = |id: &str| id.contains("::r");
        vectors.retain(|(id, _)| !is_review(id) || kept.contains(id.as_str()));
    }
    let corpus = Corpus::from_parts(items, reviews, queries)?;
    let store = EmbeddingStore::from_vectors(dim, vectors, &corpus)?;
    Ok((corpus, store))
}
