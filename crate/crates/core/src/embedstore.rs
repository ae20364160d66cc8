//! Id-indexed dense vectors with exact dot-product scoring.
//!
//! Vectors are stored as `f32` in one contiguous row-major buffer; every score
//! is accumulated in `f64`.
//!
//! On-disk format (little-endian): magic `RIRE`, version `u16 = 1`, dim `u32`,
//! count `u64`, then `count` records of `[id_len u32][id utf-8][dim x f32]`.
//! Paths ending in `.jsonl` hold `{"id", "vector"}` lines instead.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, Corpus, CorpusError};

pub const MAGIC: &[u8; 4] = b"RIRE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"RIRE\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file truncated while reading {what} of record {record}")]
    Truncated { record: u64, what: &'static str },
    #[error("vector `{id}` has {found} values, expected dimension {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch: {left} vs {right}")]
    ProbeDimension { left: usize, right: usize },
    #[error("vector `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("duplicate vector id `{0}`")]
    DuplicateId(String),
    #[error("no vector for review `{0}`")]
    MissingReviewVector(String),
    #[error("no vector for `{0}`")]
    MissingVector(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("record {0} has a non utf-8 id")]
    BadId(u64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error(transparent)]
    Jsonl(#[from] CorpusError),
}

/// One review scored against a probe vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredReview {
    pub review_id: String,
    pub score: f64,
}

/// Score descending, then id ascending.
pub fn by_score_then_id(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
    /// item id -> row indices of its reviews, sorted by review id.
    item_index: BTreeMap<String, Vec<usize>>,
}

/// Exact dot product accumulated in double precision.
pub fn similarity(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::ProbeDimension {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot(a, b))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

impl EmbeddingStore {
    /// Builds a store over `vectors`, indexing every review of `corpus`.
    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = (String, Vec<f32>)>,
        corpus: &Corpus,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        let mut store = EmbeddingStore {
            dim,
            ids: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
            item_index: BTreeMap::new(),
        };
        for (id, vector) in vectors {
            store.push(id, &vector)?;
        }
        for item in corpus.items() {
            let reviews = corpus.reviews_of(&item.id).unwrap_or_default();
            let mut rows = Vec::with_capacity(reviews.len());
            for rid in reviews {
                let row = *store
                    .index
                    .get(rid)
                    .ok_or_else(|| EmbedError::MissingReviewVector(rid.clone()))?;
                rows.push(row);
            }
            store.item_index.insert(item.id.clone(), rows);
        }
        Ok(store)
    }

    fn push(&mut self, id: String, vector: &[f32]) -> Result<(), EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(id));
        }
        if self.index.contains_key(&id) {
            return Err(EmbedError::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&row| self.row(row))
    }

    pub fn require(&self, id: &str) -> Result<&[f32], EmbedError> {
        self.vector(id)
            .ok_or_else(|| EmbedError::MissingVector(id.to_string()))
    }

    fn row(&self, row: usize) -> &[f32] {
        &self.rows[row * self.dim..(row + 1) * self.dim]
    }

    /// Item ids in ascending order.
    pub fn item_ids(&self) -> impl ExactSizeIterator<Item = &str> {
        self.item_index.keys().map(String::as_str)
    }

    pub fn has_item(&self, item_id: &str) -> bool {
        self.item_index.contains_key(item_id)
    }

    /// Number of review vectors linked to items.
    pub fn review_count(&self) -> usize {
        self.item_index.values().map(Vec::len).sum()
    }

    /// All vectors in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(row, id)| (id.as_str(), self.row(row)))
    }

    /// Every review of `item_id` scored against `probe`, sorted by score
    /// descending then review id ascending.
    pub fn scored_reviews(
        &self,
        probe: &[f32],
        item_id: &str,
    ) -> Result<Vec<ScoredReview>, EmbedError> {
        self.check_probe(probe)?;
        let rows = self
            .item_index
            .get(item_id)
            .ok_or_else(|| EmbedError::UnknownItem(item_id.to_string()))?;
        Ok(self.score_rows(probe, rows, rows.len()))
    }

    pub(crate) fn check_probe(&self, probe: &[f32]) -> Result<(), EmbedError> {
        if probe.len() != self.dim {
            return Err(EmbedError::ProbeDimension {
                left: probe.len(),
                right: self.dim,
            });
        }
        Ok(())
    }

    /// Scores the rows and keeps the best `k` (rows are already id-sorted,
    /// so a stable sort on score alone yields the id tie-break).
    pub(crate) fn score_rows(&self, probe: &[f32], rows: &[usize], k: usize) -> Vec<ScoredReview> {
        let mut scored: Vec<(f64, usize)> = rows
            .iter()
            .map(|&row| (dot(probe, self.row(row)), row))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(score, row)| ScoredReview {
                review_id: self.ids[row].clone(),
                score,
            })
            .collect()
    }

    pub(crate) fn item_rows(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.item_index
            .iter()
            .map(|(id, rows)| (id.as_str(), rows.as_slice()))
    }
}

/// The `min(k, R_i)` best reviews of `item_id` for `probe`.
pub fn top_k_reviews(
    store: &EmbeddingStore,
    probe: &[f32],
    item_id: &str,
    k: usize,
) -> Result<Vec<ScoredReview>, EmbedError> {
    store.check_probe(probe)?;
    let rows = store
        .item_index
        .get(item_id)
        .ok_or_else(|| EmbedError::UnknownItem(item_id.to_string()))?;
    Ok(store.score_rows(probe, rows, k))
}

#[derive(Serialize, Deserialize)]
struct JsonVector {
    id: String,
    vector: Vec<f32>,
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Reads raw `(id, vector)` records and the declared dimension.
pub fn read_vectors(path: &Path) -> Result<(usize, Vec<(String, Vec<f32>)>), EmbedError> {
    if is_jsonl(path) {
        let records: Vec<JsonVector> = read_jsonl(path)?;
        let dim = records.first().map_or(0, |r| r.vector.len());
        return Ok((dim, records.into_iter().map(|r| (r.id, r.vector)).collect()));
    }
    let io_err = |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, 0, "header")?;
    if &magic != MAGIC {
        return Err(EmbedError::BadMagic { found: magic });
    }
    let mut buf2 = [0u8; 2];
    read_exact(&mut reader, &mut buf2, 0, "header")?;
    let version = u16::from_le_bytes(buf2);
    if version != FORMAT_VERSION {
        return Err(EmbedError::BadVersion(version));
    }
    let mut buf4 = [0u8; 4];
    read_exact(&mut reader, &mut buf4, 0, "header")?;
    let dim = u32::from_le_bytes(buf4) as usize;
    let mut buf8 = [0u8; 8];
    read_exact(&mut reader, &mut buf8, 0, "header")?;
    let count = u64::from_le_bytes(buf8);

    let mut records = Vec::new();
    let mut payload = vec![0u8; dim * 4];
    for record in 0..count {
        read_exact(&mut reader, &mut buf4, record, "id length")?;
        let mut id = vec![0u8; u32::from_le_bytes(buf4) as usize];
        read_exact(&mut reader, &mut id, record, "id")?;
        let id = String::from_utf8(id).map_err(|_| EmbedError::BadId(record))?;
        read_exact(&mut reader, &mut payload, record, "vector")?;
        let vector = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((id, vector));
    }
    Ok((dim, records))
}

fn read_exact(
    reader: &mut impl Read,
    buf: &mut [u8],
    record: u64,
    what: &'static str,
) -> Result<(), EmbedError> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => EmbedError::Truncated { record, what },
        _ => EmbedError::Io {
            path: PathBuf::new(),
            source: e,
        },
    })
}

pub fn load_embeddings(path: &Path, corpus: &Corpus) -> Result<EmbeddingStore, EmbedError> {
    let (dim, records) = read_vectors(path)?;
    EmbeddingStore::from_vectors(dim, records, corpus)
}

/// Writes `(id, vector)` records in the binary format, or JSON-Lines when the
/// path ends in `.jsonl`.
pub fn write_vectors<'a>(
    path: &Path,
    dim: usize,
    records: impl ExactSizeIterator<Item = (&'a str, &'a [f32])>,
) -> Result<(), EmbedError> {
    let io_err = |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    if is_jsonl(path) {
        for (id, vector) in records {
            let line = serde_json::to_string(&JsonVector {
                id: id.to_string(),
                vector: vector.to_vec(),
            })
            .expect("vectors serialize");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        return out.flush().map_err(io_err);
    }
    out.write_all(MAGIC).map_err(io_err)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(io_err)?;
    out.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&(records.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for (id, vector) in records {
        if vector.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                id: id.to_string(),
                expected: dim,
                found: vector.len(),
            });
        }
        out.write_all(&(id.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        out.write_all(id.as_bytes()).map_err(io_err)?;
        for v in vector {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), EmbedError> {
    write_vectors(
        path,
        store.dim,
        store.iter().collect::<Vec<_>>().into_iter(),
    )
}
