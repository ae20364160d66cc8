//! Two-level review corpora: items described only through their reviews,
//! with labelled item aspects, review aspect mentions and multi-aspect queries.
//!
//! Aspect ids are globally unique strings of the form `"<owner>::a<j>"`, where
//! the owner is the item or query id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{kind} `{owner}` references unknown item `{item_id}`")]
    DanglingItem {
        kind: &'static str,
        owner: String,
        item_id: String,
    },
    #[error("unknown item `{0}`")]
    UnknownItem(String),
}

/// A natural-language aspect: a query sub-span or a labelled item property.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub id: String,
    pub text: String,
}

impl Aspect {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Canonical aspect id for the `index`-th aspect of `owner`.
pub fn aspect_id(owner: &str, index: usize) -> String {
    format!("{owner}::a{index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub aspects: Vec<Aspect>,
}

impl Item {
    pub fn has_aspect(&self, aspect_id: &str) -> bool {
        self.aspects.iter().any(|a| a.id == aspect_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub id: String,
    pub item_id: String,
    pub text: String,
    pub aspect_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub gt_aspects: Vec<Aspect>,
    pub correct_item_id: String,
}

/// A fully linked corpus. Immutable once built; every review and query
/// refers to an existing item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    items: BTreeMap<String, Item>,
    reviews: BTreeMap<String, Review>,
    queries: BTreeMap<String, Query>,
    item_reviews: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    /// Links the three record sets, rejecting duplicate ids and dangling
    /// item references. Aspect-level invariants are left to [`validate_corpus`].
    pub fn from_parts(
        items: impl IntoIterator<Item = Item>,
        reviews: impl IntoIterator<Item = Review>,
        queries: impl IntoIterator<Item = Query>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for item in items {
            if corpus.items.contains_key(&item.id) {
                return Err(CorpusError::DuplicateId {
                    kind: "item",
                    id: item.id,
                });
            }
            corpus.item_reviews.insert(item.id.clone(), Vec::new());
            corpus.items.insert(item.id.clone(), item);
        }
        for review in reviews {
            if corpus.reviews.contains_key(&review.id) {
                return Err(CorpusError::DuplicateId {
                    kind: "review",
                    id: review.id,
                });
            }
            let Some(list) = corpus.item_reviews.get_mut(&review.item_id) else {
                return Err(CorpusError::DanglingItem {
                    kind: "review",
                    owner: review.id,
                    item_id: review.item_id,
                });
            };
            list.push(review.id.clone());
            corpus.reviews.insert(review.id.clone(), review);
        }
        for query in queries {
            if corpus.queries.contains_key(&query.id) {
                return Err(CorpusError::DuplicateId {
                    kind: "query",
                    id: query.id,
                });
            }
            if !corpus.items.contains_key(&query.correct_item_id) {
                return Err(CorpusError::DanglingItem {
                    kind: "query",
                    owner: query.id,
                    item_id: query.correct_item_id,
                });
            }
            corpus.queries.insert(query.id.clone(), query);
        }
        // Input order must not leak into the linked structure.
        for list in corpus.item_reviews.values_mut() {
            list.sort();
        }
        Ok(corpus)
    }

    pub fn items(&self) -> impl ExactSizeIterator<Item = &Item> {
        self.items.values()
    }

    pub fn reviews(&self) -> impl ExactSizeIterator<Item = &Review> {
        self.reviews.values()
    }

    pub fn queries(&self) -> impl ExactSizeIterator<Item = &Query> {
        self.queries.values()
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn review(&self, id: &str) -> Option<&Review> {
        self.reviews.get(id)
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.queries.get(id)
    }

    /// Review ids of an item, sorted ascending.
    pub fn reviews_of(&self, item_id: &str) -> Option<&[String]> {
        self.item_reviews.get(item_id).map(Vec::as_slice)
    }

    /// Queries whose correct item has at least two aspects. Single-aspect
    /// targets stay in the corpus; experiments opt into this filter.
    pub fn multi_aspect_queries(&self) -> impl Iterator<Item = &Query> {
        self.queries.values().filter(|q| {
            self.items
                .get(&q.correct_item_id)
                .is_some_and(|item| item.aspects.len() >= 2)
        })
    }

    /// Looks up the aspect with `id` on any item or query.
    pub fn find_aspect(&self, id: &str) -> Option<&Aspect> {
        let owner = id.split("::").next()?;
        let from_item = self
            .items
            .get(owner)
            .and_then(|i| i.aspects.iter().find(|a| a.id == id));
        from_item.or_else(|| {
            self.queries
                .get(owner)
                .and_then(|q| q.gt_aspects.iter().find(|a| a.id == id))
        })
    }

    /// Owning item of an item-aspect id, if any.
    pub fn aspect_owner(&self, aspect_id: &str) -> Option<&Item> {
        let owner = aspect_id.split("::").next()?;
        self.items.get(owner).filter(|i| i.has_aspect(aspect_id))
    }
}

/// File locations of a corpus on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub items: PathBuf,
    pub reviews: PathBuf,
    pub queries: PathBuf,
}

impl CorpusPaths {
    /// Conventional `items.jsonl` / `reviews.jsonl` / `queries.jsonl` layout.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            items: dir.join("items.jsonl"),
            reviews: dir.join("reviews.jsonl"),
            queries: dir.join("queries.jsonl"),
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("corpus records always serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn load_corpus(
    items_path: &Path,
    reviews_path: &Path,
    queries_path: &Path,
) -> Result<Corpus, CorpusError> {
    let items: Vec<Item> = read_jsonl(items_path)?;
    let reviews: Vec<Review> = read_jsonl(reviews_path)?;
    let queries: Vec<Query> = read_jsonl(queries_path)?;
    Corpus::from_parts(items, reviews, queries)
}

pub fn save_corpus(corpus: &Corpus, paths: &CorpusPaths) -> Result<(), CorpusError> {
    write_jsonl(&paths.items, corpus.items())?;
    write_jsonl(&paths.reviews, corpus.reviews())?;
    write_jsonl(&paths.queries, corpus.queries())
}

/// A single invariant violation found by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ItemWithoutAspects {
        item_id: String,
    },
    DuplicateItemAspect {
        item_id: String,
        aspect_id: String,
    },
    EmptyAspectText {
        owner_id: String,
        aspect_id: String,
    },
    ReviewWithoutAspects {
        review_id: String,
    },
    ForeignReviewAspect {
        review_id: String,
        item_id: String,
        aspect_id: String,
    },
    QueryWithoutAspects {
        query_id: String,
    },
    QueryAspectNotSubspan {
        query_id: String,
        aspect_id: String,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::ItemWithoutAspects { item_id } => write!(f, "item {item_id} has no aspects"),
            Self::DuplicateItemAspect { item_id, aspect_id } => {
                write!(f, "item {item_id} repeats aspect {aspect_id}")
            }
            Self::EmptyAspectText {
                owner_id,
                aspect_id,
            } => write!(f, "{owner_id}: aspect {aspect_id} has empty text"),
            Self::ReviewWithoutAspects { review_id } => {
                write!(f, "review {review_id} mentions no aspect")
            }
            Self::ForeignReviewAspect {
                review_id,
                item_id,
                aspect_id,
            } => write!(
                f,
                "review {review_id} mentions {aspect_id}, which is not an aspect of {item_id}"
            ),
            Self::QueryWithoutAspects { query_id } => write!(f, "query {query_id} has no aspects"),
            Self::QueryAspectNotSubspan {
                query_id,
                aspect_id,
            } => write!(
                f,
                "query {query_id}: aspect {aspect_id} is not a non-overlapping sub-span of the text"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Finds a char-offset placement for each aspect text inside `text` so that
/// no two placements overlap, trying occurrences left to right.
pub fn place_subspans(text: &str, aspects: &[&str]) -> Option<Vec<(usize, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    for aspect in aspects {
        let needle: Vec<char> = aspect.chars().collect();
        if needle.is_empty() || needle.len() > chars.len() {
            return None;
        }
        let slot = (0..=chars.len() - needle.len()).find(|&start| {
            let end = start + needle.len();
            chars[start..end] == needle[..] && taken.iter().all(|&(s, e)| end <= s || start >= e)
        })?;
        taken.push((slot, slot + needle.len()));
    }
    Some(taken)
}

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    for item in corpus.items() {
        if item.aspects.is_empty() {
            violations.push(Violation::ItemWithoutAspects {
                item_id: item.id.clone(),
            });
        }
        let mut seen = BTreeSet::new();
        for aspect in &item.aspects {
            if !seen.insert(aspect.id.as_str()) {
                violations.push(Violation::DuplicateItemAspect {
                    item_id: item.id.clone(),
                    aspect_id: aspect.id.clone(),
                });
            }
            if aspect.text.trim().is_empty() {
                violations.push(Violation::EmptyAspectText {
                    owner_id: item.id.clone(),
                    aspect_id: aspect.id.clone(),
                });
            }
        }
    }
    for review in corpus.reviews() {
        if review.aspect_ids.is_empty() {
            violations.push(Violation::ReviewWithoutAspects {
                review_id: review.id.clone(),
            });
        }
        let item = corpus
            .item(&review.item_id)
            .expect("linked corpus resolves review items");
        for aspect_id in &review.aspect_ids {
            if !item.has_aspect(aspect_id) {
                violations.push(Violation::ForeignReviewAspect {
                    review_id: review.id.clone(),
                    item_id: item.id.clone(),
                    aspect_id: aspect_id.clone(),
                });
            }
        }
    }
    for query in corpus.queries() {
        if query.gt_aspects.is_empty() {
            violations.push(Violation::QueryWithoutAspects {
                query_id: query.id.clone(),
            });
        }
        for aspect in &query.gt_aspects {
            if aspect.text.trim().is_empty() {
                violations.push(Violation::EmptyAspectText {
                    owner_id: query.id.clone(),
                    aspect_id: aspect.id.clone(),
                });
            }
        }
        let texts: Vec<&str> = query.gt_aspects.iter().map(|a| a.text.as_str()).collect();
        if place_subspans(&query.text, &texts).is_none() {
            // Report the first aspect that cannot be placed.
            let culprit = (1..=texts.len())
                .find(|&n| place_subspans(&query.text, &texts[..n]).is_none())
                .map(|n| query.gt_aspects[n - 1].id.clone())
                .unwrap_or_default();
            violations.push(Violation::QueryAspectNotSubspan {
                query_id: query.id.clone(),
                aspect_id: culprit,
            });
        }
    }
    ValidationReport { violations }
}

/// Degree view of the bipartite review–aspect graph of one item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AspectGraphStats {
    pub item_id: String,
    pub degree_per_aspect: BTreeMap<String, usize>,
    /// Mean over reviews of `(|aspects mentioned| - 1) / (|item aspects| - 1)`.
    /// 1.0 for single-aspect items and for items without reviews.
    pub overlap_fraction: f64,
}

pub fn aspect_graph_stats(corpus: &Corpus, item_id: &str) -> Result<AspectGraphStats, CorpusError> {
    let item = corpus
        .item(item_id)
        .ok_or_else(|| CorpusError::UnknownItem(item_id.to_string()))?;
    let mut degree: BTreeMap<String, usize> =
        item.aspects.iter().map(|a| (a.id.clone(), 0)).collect();
    let review_ids = corpus.reviews_of(item_id).unwrap_or_default();
    let n_aspects = item.aspects.len();
    let mut overlap_sum = 0.0;
    for rid in review_ids {
        let review = corpus.review(rid).expect("item index points at reviews");
        let mut mentioned = 0usize;
        for aid in &review.aspect_ids {
            if let Some(d) = degree.get_mut(aid) {
                *d += 1;
                mentioned += 1;
            }
        }
        if n_aspects > 1 {
            overlap_sum += mentioned.saturating_sub(1) as f64 / (n_aspects - 1) as f64;
        }
    }
    let overlap_fraction = if n_aspects <= 1 || review_ids.is_empty() {
        1.0
    } else {
        overlap_sum / review_ids.len() as f64
    };
    Ok(AspectGraphStats {
        item_id: item_id.to_string(),
        degree_per_aspect: degree,
        overlap_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn item(id: &str, n: usize) -> Item {
        Item {
            id: id.into(),
            aspects: (0..n)
                .map(|j| Aspect::new(aspect_id(id, j), format!("aspect {j} of {id}")))
                .collect(),
        }
    }

    fn review(id: &str, item_id: &str, aspects: &[&str]) -> Review {
        Review {
            id: id.into(),
            item_id: item_id.into(),
            text: format!("text of {id}"),
            aspect_ids: aspects.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn query(id: &str, item_id: &str) -> Query {
        Query {
            id: id.into(),
            text: "meatball recipe that is quick".into(),
            gt_aspects: vec![
                Aspect::new(aspect_id(id, 0), "meatball"),
                Aspect::new(aspect_id(id, 1), "quick"),
            ],
            correct_item_id: item_id.into(),
        }
    }

    #[test]
    fn dangling_review_is_rejected_with_the_id() {
        let err = Corpus::from_parts(
            vec![item("i1", 1)],
            vec![review("r1", "nope", &["nope::a0"])],
            vec![],
        )
        .unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err =
            Corpus::from_parts(vec![item("i1", 1), item("i1", 2)], vec![], vec![]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { kind: "item", .. }));
        let err = Corpus::from_parts(
            vec![item("i1", 1)],
            vec![
                review("r1", "i1", &["i1::a0"]),
                review("r1", "i1", &["i1::a0"]),
            ],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CorpusError::DuplicateId { kind: "review", .. }
        ));
    }

    #[test]
    fn query_with_unknown_correct_item_is_rejected() {
        let err =
            Corpus::from_parts(vec![item("i1", 2)], vec![], vec![query("q1", "i9")]).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::DanglingItem { kind: "query", .. }
        ));
    }

    #[test]
    fn clean_corpus_validates_empty() {
        let corpus = Corpus::from_parts(
            vec![item("i1", 2)],
            vec![review("r1", "i1", &["i1::a0", "i1::a1"])],
            vec![query("q1", "i1")],
        )
        .unwrap();
        assert!(validate_corpus(&corpus).is_empty());
    }

    #[test]
    fn review_without_aspects_is_one_violation() {
        let corpus =
            Corpus::from_parts(vec![item("i1", 2)], vec![review("r1", "i1", &[])], vec![]).unwrap();
        let report = validate_corpus(&corpus);
        assert_eq!(
            report.violations,
            vec![Violation::ReviewWithoutAspects {
                review_id: "r1".into()
            }]
        );
    }

    #[test]
    fn review_mentioning_another_items_aspect_is_one_violation() {
        let corpus = Corpus::from_parts(
            vec![item("i1", 2), item("i2", 2)],
            vec![review("r1", "i1", &["i2::a0"])],
            vec![],
        )
        .unwrap();
        let report = validate_corpus(&corpus);
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(
            &report.violations[0],
            Violation::ForeignReviewAspect { aspect_id, .. } if aspect_id == "i2::a0"
        ));
    }

    #[test]
    fn query_aspects_must_be_disjoint_subspans() {
        let mut q = query("q1", "i1");
        q.gt_aspects[1].text = "meatball".into();
        q.text = "a meatball dish".into();
        let corpus = Corpus::from_parts(vec![item("i1", 2)], vec![], vec![q]).unwrap();
        let report = validate_corpus(&corpus);
        assert_eq!(
            report.violations,
            vec![Violation::QueryAspectNotSubspan {
                query_id: "q1".into(),
                aspect_id: "q1::a1".into()
            }]
        );
        assert_eq!(
            place_subspans("meatball meatball", &["meatball", "meatball"]),
            Some(vec![(0, 8), (9, 17)])
        );
    }

    #[test]
    fn graph_stats_fully_overlapping() {
        let reviews: Vec<Review> = (0..20)
            .map(|r| review(&format!("r{r}"), "i1", &["i1::a0", "i1::a1"]))
            .collect();
        let corpus = Corpus::from_parts(vec![item("i1", 2)], reviews, vec![]).unwrap();
        let stats = aspect_graph_stats(&corpus, "i1").unwrap();
        assert_eq!(stats.degree_per_aspect["i1::a0"], 20);
        assert_eq!(stats.degree_per_aspect["i1::a1"], 20);
        assert_eq!(stats.overlap_fraction, 1.0);
    }

    #[test]
    fn graph_stats_fully_disjoint() {
        let reviews: Vec<Review> = (0..20)
            .map(|r| {
                let a = if r < 10 { "i1::a0" } else { "i1::a1" };
                review(&format!("r{r}"), "i1", &[a])
            })
            .collect();
        let corpus = Corpus::from_parts(vec![item("i1", 2)], reviews, vec![]).unwrap();
        let stats = aspect_graph_stats(&corpus, "i1").unwrap();
        assert_eq!(stats.degree_per_aspect["i1::a0"], 10);
        assert_eq!(stats.degree_per_aspect["i1::a1"], 10);
        assert_eq!(stats.overlap_fraction, 0.0);
    }

    #[test]
    fn graph_stats_single_aspect_is_fully_overlapping() {
        let reviews = vec![
            review("r1", "i1", &["i1::a0"]),
            review("r2", "i1", &["i1::a0"]),
        ];
        let corpus = Corpus::from_parts(vec![item("i1", 1)], reviews, vec![]).unwrap();
        assert_eq!(
            aspect_graph_stats(&corpus, "i1").unwrap().overlap_fraction,
            1.0
        );
        assert!(matches!(
            aspect_graph_stats(&corpus, "zz"),
            Err(CorpusError::UnknownItem(_))
        ));
    }

    #[test]
    fn multi_aspect_filter_mirrors_recipe_mpr_counts() {
        // Item aspect-count histogram of the Recipe-MPR subset (1..=8 aspects).
        let histogram = [76usize, 282, 72, 29, 10, 1, 2, 1];
        let mut items = Vec::new();
        for (k, &count) in histogram.iter().enumerate() {
            for n in 0..count {
                items.push(item(&format!("i{}_{n}", k + 1), k + 1));
            }
        }
        assert_eq!(items.len(), 473);
        // 411 queries on multi-aspect items, the rest on single-aspect ones.
        let (single, multi): (Vec<&Item>, Vec<&Item>) =
            items.iter().partition(|it| it.aspects.len() == 1);
        let mut queries = Vec::new();
        for n in 0..411 {
            queries.push(query(&format!("q{n}"), &multi[n % multi.len()].id));
        }
        for n in 411..500 {
            queries.push(query(&format!("q{n}"), &single[n % single.len()].id));
        }
        let corpus = Corpus::from_parts(items, vec![], queries).unwrap();
        assert_eq!(corpus.items().len(), 473);
        assert_eq!(corpus.queries().len(), 500);
        assert_eq!(corpus.multi_aspect_queries().count(), 411);
    }
}
