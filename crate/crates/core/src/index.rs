//! Exact top-k cosine retrieval over precomputed unit vectors.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, IndexConfig, UNIT_NORM_TOLERANCE};
use crate::util::write_atomic;

pub const INDEX_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate entry id `{0}` in index")]
    Duplicate(String),
    #[error("index entry `{entry_id}`: {message}")]
    Corrupt { entry_id: String, message: String },
    #[error("{path}: not found")]
    NotFound { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed index file: {0}")]
    Format(String),
    #[error("unsupported index schema_version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
}

/// Cosine similarity clamped to [-1, 1].
///
/// Symmetric bit-for-bit: the dot product sums elementwise products in index
/// order and IEEE multiplication commutes.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dimension() != b.dimension() {
        return Err(IndexError::DimensionMismatch { expected: a.dimension(), found: b.dimension() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub entry_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexItem {
    pub entry_id: String,
    pub vector: EmbeddingVector,
}

/// Precomputed unit embeddings for one [`IndexConfig`], sorted by entry id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    config: IndexConfig,
    provider_id: String,
    dimension: usize,
    items: Vec<IndexItem>,
}

/// Candidate ordering: higher score first, then ascending id.
fn better(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .expect("scores are finite")
        .then_with(|| a_id.cmp(b_id))
}

struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    // "Greater" means worse, so a max-heap keeps the worst kept candidate on top.
    fn cmp(&self, other: &Self) -> Ordering {
        better(self.score, self.id, other.score, other.id)
    }
}

impl RetrievalIndex {
    /// Build from raw vectors: each is normalized, items are sorted by id.
    pub fn build(
        config: IndexConfig,
        provider_id: impl Into<String>,
        dimension: usize,
        vectors: Vec<(String, EmbeddingVector)>,
    ) -> Result<Self, IndexError> {
        let mut items = Vec::with_capacity(vectors.len());
        for (entry_id, v) in vectors {
            if v.dimension() != dimension {
                return Err(IndexError::Corrupt {
                    entry_id,
                    message: format!("vector has dimension {}, index has {dimension}", v.dimension()),
                });
            }
            let vector = v.normalized().map_err(|_| IndexError::Corrupt {
                entry_id: entry_id.clone(),
                message: "zero-norm vector".into(),
            })?;
            items.push(IndexItem { entry_id, vector });
        }
        items.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        if let Some(w) = items.windows(2).find(|w| w[0].entry_id == w[1].entry_id) {
            return Err(IndexError::Duplicate(w[0].entry_id.clone()));
        }
        Ok(Self { config, provider_id: provider_id.into(), dimension, items })
    }

    pub fn empty(config: IndexConfig, provider_id: impl Into<String>, dimension: usize) -> Self {
        Self { config, provider_id: provider_id.into(), dimension, items: Vec::new() }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, entry_id: &str) -> bool {
        self.position(entry_id).is_some()
    }

    fn position(&self, entry_id: &str) -> Option<usize> {
        self.items.binary_search_by(|i| i.entry_id.as_str().cmp(entry_id)).ok()
    }

    /// A new index with one more item (append and re-sort).
    pub fn with_item(&self, entry_id: impl Into<String>, vector: EmbeddingVector) -> Result<Self, IndexError> {
        let entry_id = entry_id.into();
        if self.contains(&entry_id) {
            return Err(IndexError::Duplicate(entry_id));
        }
        let mut vectors: Vec<_> = self.items.iter().map(|i| (i.entry_id.clone(), i.vector.clone())).collect();
        vectors.push((entry_id, vector));
        Self::build(self.config.clone(), self.provider_id.clone(), self.dimension, vectors)
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<(), IndexError> {
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch { expected: self.dimension, found: query.dimension() });
        }
        if query.norm() == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        Ok(())
    }

    fn scores<'a>(&'a self, query: &'a EmbeddingVector) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        self.items.iter().map(move |item| {
            let s = cosine_similarity(query, &item.vector).expect("dimensions checked");
            (item.entry_id.as_str(), s)
        })
    }

    /// The `min(k, N)` most similar items by exhaustive scan. Exact score ties
    /// go to the smaller entry id.
    pub fn query_top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RankedResult>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        self.check_query(query)?;
        let mut heap = BinaryHeap::with_capacity(k.min(self.items.len()) + 1);
        for (id, score) in self.scores(query) {
            let cand = Candidate { score, id };
            if heap.len() < k {
                heap.push(cand);
            } else if heap.peek().is_some_and(|worst| cand < *worst) {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(i, c)| RankedResult { entry_id: c.id.to_string(), score: c.score, rank: i + 1 })
            .collect())
    }

    /// 1-based rank of `target` in the full ordering, `None` if absent.
    pub fn rank_of(&self, query: &EmbeddingVector, target: &str) -> Result<Option<usize>, IndexError> {
        self.check_query(query)?;
        let Some(pos) = self.position(target) else {
            return Ok(None);
        };
        let target_score = cosine_similarity(query, &self.items[pos].vector)?;
        let ahead = self
            .scores(query)
            .filter(|(id, s)| better(*s, id, target_score, target) == Ordering::Less)
            .count();
        Ok(Some(ahead + 1))
    }

    /// Warning text when this index was built by a different provider.
    pub fn provider_mismatch(&self, provider_id: &str) -> Option<String> {
        (self.provider_id != provider_id).then(|| {
            format!(
                "index was built with provider `{}` but queries use `{provider_id}`; scores are not comparable",
                self.provider_id
            )
        })
    }

    pub fn to_json(&self) -> String {
        let doc = IndexDoc {
            schema_version: u64::from(INDEX_SCHEMA_VERSION),
            config_name: self.config.name(),
            provider_id: self.provider_id.clone(),
            dimension: self.dimension,
            items: self
                .items
                .iter()
                .map(|i| RawItem { entry_id: i.entry_id.clone(), vector: i.vector.values().to_vec() })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, IndexError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| IndexError::Format(e.to_string()))?;
        let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if found != u64::from(INDEX_SCHEMA_VERSION) {
            return Err(IndexError::SchemaVersion { found, expected: INDEX_SCHEMA_VERSION });
        }
        let doc: IndexDoc = serde_json::from_value(value).map_err(|e| IndexError::Format(e.to_string()))?;
        let config: IndexConfig = doc.config_name.parse().map_err(|e| IndexError::Format(format!("{e}")))?;
        let mut items = Vec::with_capacity(doc.items.len());
        for raw in doc.items {
            if raw.vector.len() != doc.dimension {
                return Err(IndexError::Corrupt {
                    entry_id: raw.entry_id,
                    message: format!("vector length {} does not match dimension {}", raw.vector.len(), doc.dimension),
                });
            }
            let vector = EmbeddingVector::new(raw.vector)
                .map_err(|e| IndexError::Corrupt { entry_id: raw.entry_id.clone(), message: e.to_string() })?;
            if !vector.is_unit() {
                return Err(IndexError::Corrupt {
                    entry_id: raw.entry_id,
                    message: format!("vector norm {} is not 1 ± {UNIT_NORM_TOLERANCE}", vector.norm()),
                });
            }
            items.push(IndexItem { entry_id: raw.entry_id, vector });
        }
        if let Some(w) = items.windows(2).find(|w| w[0].entry_id >= w[1].entry_id) {
            return Err(if w[0].entry_id == w[1].entry_id {
                IndexError::Duplicate(w[0].entry_id.clone())
            } else {
                IndexError::Format(format!("items not sorted by entry_id at `{}`", w[1].entry_id))
            });
        }
        Ok(Self { config, provider_id: doc.provider_id, dimension: doc.dimension, items })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, self.to_json().as_bytes())
            .map_err(|source| IndexError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let text = fs::read_to_string(path).map_err(|source| {
            if source.kind() == io::ErrorKind::NotFound {
                IndexError::NotFound { path: path.to_path_buf() }
            } else {
                IndexError::Io { path: path.to_path_buf(), source }
            }
        })?;
        Self::from_json(&text)
    }

    /// Load and compare against the provider the caller will query with. A
    /// mismatch is logged and returned as a warning.
    pub fn load_for_provider(path: &Path, provider_id: &str) -> Result<(Self, Option<String>), IndexError> {
        let index = Self::load(path)?;
        let warning = index.provider_mismatch(provider_id);
        if let Some(w) = &warning {
            tracing::warn!("{}: {w}", path.display());
        }
        Ok((index, warning))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexDoc {
    schema_version: u64,
    config_name: String,
    provider_id: String,
    dimension: usize,
    items: Vec<RawItem>,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    entry_id: String,
    vector: Vec<f64>,
}
