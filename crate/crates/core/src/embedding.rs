//! Text embeddings: the provider interface, the hashed bag-of-tokens fallback,
//! and the per-configuration embedding input.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{Corpus, ExpertiseLevel, ModelEntry};
use crate::util::{self, HttpFailure, RetryPolicy};

pub const DEFAULT_DIMENSION: usize = 768;
pub const DEFAULT_MAX_INPUT_CHARS: usize = 32_000;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no letter or digit tokens")]
    NoTokens,
    #[error("dimension must be at least 2 (got {0})")]
    BadDimension(usize),
    #[error("entry `{entry_id}` has no {level} description required by {config}")]
    MissingDescription { entry_id: String, level: ExpertiseLevel, config: IndexConfig },
    #[error("embedding provider unavailable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding provider contract violated: {0}")]
    Contract(String),
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    #[error("unknown index configuration `{0}`")]
    BadConfigName(String),
}

impl EmbedError {
    pub fn is_transport(&self) -> bool {
        matches!(self, EmbedError::Transport { .. })
    }
}

/// A finite real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::InvalidVector("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector(format!("component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::InvalidVector("zero norm".into()));
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

/// Which description levels augment the source code in a document's embedding input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexConfig {
    levels: BTreeSet<ExpertiseLevel>,
}

impl IndexConfig {
    pub fn source_only() -> Self {
        Self::default()
    }

    pub fn with_levels(levels: impl IntoIterator<Item = ExpertiseLevel>) -> Self {
        Self { levels: levels.into_iter().collect() }
    }

    /// Source code is always part of the input.
    pub fn include_source(&self) -> bool {
        true
    }

    pub fn levels(&self) -> impl Iterator<Item = ExpertiseLevel> + '_ {
        self.levels.iter().copied()
    }

    pub fn contains(&self, level: ExpertiseLevel) -> bool {
        self.levels.contains(&level)
    }

    /// The eight configurations in table column order:
    /// SC, SC+D1, SC+D2, SC+D3, SC+D1&2, SC+D1&3, SC+D2&3, SC+D1&2&3.
    pub fn all() -> Vec<IndexConfig> {
        use ExpertiseLevel::*;
        vec![
            Self::source_only(),
            Self::with_levels([Novice]),
            Self::with_levels([Intermediate]),
            Self::with_levels([Expert]),
            Self::with_levels([Novice, Intermediate]),
            Self::with_levels([Novice, Expert]),
            Self::with_levels([Intermediate, Expert]),
            Self::with_levels([Novice, Intermediate, Expert]),
        ]
    }

    pub fn name(&self) -> String {
        if self.levels.is_empty() {
            return "SC".to_string();
        }
        let digits: Vec<String> = self.levels.iter().map(|l| l.digit().to_string()).collect();
        format!("SC+D{}", digits.join("&"))
    }
}

impl fmt::Display for IndexConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for IndexConfig {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || EmbedError::BadConfigName(s.to_string());
        let upper = compact.to_ascii_uppercase();
        if upper == "SC" {
            return Ok(Self::source_only());
        }
        let rest = upper.strip_prefix("SC+D").ok_or_else(bad)?;
        let mut levels = BTreeSet::new();
        for part in rest.split('&') {
            let part = part.strip_prefix('D').unwrap_or(part);
            let mut chars = part.chars();
            let level = match (chars.next(), chars.next()) {
                (Some(c), None) => ExpertiseLevel::from_digit(c).ok_or_else(bad)?,
                _ => return Err(bad()),
            };
            if !levels.insert(level) {
                return Err(bad());
            }
        }
        Ok(Self { levels })
    }
}

impl Serialize for IndexConfig {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for IndexConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The string fed to the embedding model for `entry` under `config`.
///
/// Source files first (each behind a `% file:` line), then one
/// `--- DESCRIPTION (<level>) ---` block per configured level in ascending
/// order, blocks separated by a blank line.
pub fn build_embedding_input(entry: &ModelEntry, config: &IndexConfig) -> Result<String, EmbedError> {
    let mut parts = vec![entry.concatenated_source()];
    for level in config.levels() {
        let text = entry.description(level).ok_or_else(|| EmbedError::MissingDescription {
            entry_id: entry.id.clone(),
            level,
            config: config.clone(),
        })?;
        parts.push(format!("--- DESCRIPTION ({}) ---\n{}", level.name(), text));
    }
    Ok(parts.join("\n\n"))
}

/// The embedding function: strings to fixed-dimension vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// Texts per `embed_batch` call.
    fn batch_size(&self) -> usize {
        32
    }

    /// Concurrent `embed_batch` calls allowed.
    fn max_in_flight(&self) -> usize {
        4
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Lowercased tokens: maximal runs of letters and digits.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deterministic hashed bag-of-tokens embedding.
///
/// Each token increments component `fnv1a64(token) mod d`; the count vector is
/// L2-normalized. Integer counting plus a fixed summation order make the result
/// bit-identical across runs and platforms.
pub fn fallback_embed(text: &str, dimension: usize) -> Result<EmbeddingVector, EmbedError> {
    if dimension < 2 {
        return Err(EmbedError::BadDimension(dimension));
    }
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut counts = vec![0u64; dimension];
    let mut any = false;
    for token in tokenize(text) {
        counts[(fnv1a64(token.as_bytes()) % dimension as u64) as usize] += 1;
        any = true;
    }
    if !any {
        return Err(EmbedError::NoTokens);
    }
    EmbeddingVector(counts.into_iter().map(|c| c as f64).collect()).normalized()
}

#[derive(Debug, Clone)]
pub struct FallbackEmbedder {
    dimension: usize,
    id: String,
}

impl FallbackEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        if dimension < 2 {
            return Err(EmbedError::BadDimension(dimension));
        }
        Ok(Self { dimension, id: format!("fallback-fnv1a-{dimension}") })
    }
}

impl Default for FallbackEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION).expect("default dimension is valid")
    }
}

impl EmbeddingProvider for FallbackEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| fallback_embed(t, self.dimension)).collect()
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}
fn default_batch_size() -> usize {
    16
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    60
}

/// Client for a `{model, input}` → `{data: [{embedding}]}` HTTP endpoint.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    id: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        if config.dimension < 2 {
            return Err(EmbedError::BadDimension(config.dimension));
        }
        let agent = util::http_agent(Duration::from_secs(config.timeout_secs));
        let id = format!("remote:{}", config.model);
        Ok(Self { config, id, agent, retry: RetryPolicy::default() })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn batch_size(&self) -> usize {
        self.config.batch_size.max(1)
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = EmbeddingsRequest { model: &self.config.model, input: texts };
        let token = util::token_from_env(self.config.api_key_env.as_deref());
        let resp: EmbeddingsResponse = self
            .retry
            .run(
                || util::post_json(&self.agent, &self.config.endpoint, token.as_deref(), &body),
                |e| matches!(e, HttpFailure::Transport(_)),
            )
            .map_err(|(e, attempts)| match e {
                HttpFailure::Transport(message) => EmbedError::Transport { attempts, message },
                HttpFailure::Protocol(message) => EmbedError::Contract(message),
            })?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::Contract(format!(
                "sent {} texts, received {} embeddings",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.into_iter().map(|d| EmbeddingVector::new(d.embedding)).collect()
    }
}

/// Wraps a provider with input validation, truncation, dimension checks,
/// normalization and batching.
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    max_input_chars: usize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self { provider, max_input_chars: DEFAULT_MAX_INPUT_CHARS }
    }

    pub fn with_max_input_chars(mut self, max_input_chars: usize) -> Self {
        self.max_input_chars = max_input_chars.max(1);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    fn prepare(&self, text: &str) -> Result<String, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        match text.char_indices().nth(self.max_input_chars) {
            Some((cut, _)) => {
                tracing::warn!(
                    chars = text.chars().count(),
                    budget = self.max_input_chars,
                    "embedding input truncated"
                );
                Ok(text[..cut].to_string())
            }
            None => Ok(text.to_string()),
        }
    }

    fn finish(&self, raw: EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
        if raw.dimension() != self.provider.dimension() {
            return Err(EmbedError::Contract(format!(
                "expected dimension {}, provider returned {}",
                self.provider.dimension(),
                raw.dimension()
            )));
        }
        raw.normalized()
    }

    /// Embed one text; the result has unit norm.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let prepared = self.prepare(text)?;
        let mut out = self.provider.embed_batch(std::slice::from_ref(&prepared))?;
        if out.len() != 1 {
            return Err(EmbedError::Contract(format!("expected 1 embedding, got {}", out.len())));
        }
        self.finish(out.pop().expect("one vector"))
    }

    /// Embed many texts, one result per text in input order.
    ///
    /// Texts go to the provider in batches with at most `max_in_flight` batches
    /// outstanding. A failed batch is retried text by text so that one bad
    /// input does not fail its neighbours.
    pub fn embed_many(&self, texts: &[String]) -> Vec<Result<EmbeddingVector, EmbedError>> {
        let prepared: Vec<Result<String, EmbedError>> = texts.iter().map(|t| self.prepare(t)).collect();
        let valid: Vec<(usize, String)> = prepared
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().ok().map(|s| (i, s.clone())))
            .collect();

        let batches: Vec<&[(usize, String)]> = valid.chunks(self.provider.batch_size().max(1)).collect();
        let in_flight = self.provider.max_in_flight().clamp(1, batches.len().max(1));
        let mut batch_results: Vec<Vec<Result<EmbeddingVector, EmbedError>>> = Vec::with_capacity(batches.len());
        for wave in batches.chunks(in_flight) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(move || self.embed_chunk(b))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            });
            batch_results.extend(results);
        }

        let mut out: Vec<Option<Result<EmbeddingVector, EmbedError>>> =
            prepared.into_iter().map(|p| p.err().map(Err)).collect();
        for (batch, results) in batches.iter().zip(batch_results) {
            for ((i, _), r) in batch.iter().zip(results) {
                out[*i] = Some(r);
            }
        }
        out.into_iter().map(|r| r.expect("every slot filled")).collect()
    }

    fn embed_chunk(&self, batch: &[(usize, String)]) -> Vec<Result<EmbeddingVector, EmbedError>> {
        let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
        match self.provider.embed_batch(&texts) {
            Ok(vs) if vs.len() == texts.len() => vs.into_iter().map(|v| self.finish(v)).collect(),
            Ok(vs) => {
                let e = EmbedError::Contract(format!("sent {} texts, received {} embeddings", texts.len(), vs.len()));
                vec![Err(e); texts.len()]
            }
            Err(e) if texts.len() == 1 || e.is_transport() => vec![Err(e); texts.len()],
            Err(_) => texts.iter().map(|t| self.embed(t)).collect(),
        }
    }

    /// One unit vector per entry, ordered by entry id. Entries that fail
    /// (missing description, provider error) are reported by id.
    pub fn embed_corpus(&self, corpus: &Corpus, config: &IndexConfig) -> EmbedCorpusOutcome {
        let mut failures = Vec::new();
        let mut ids = Vec::new();
        let mut inputs = Vec::new();
        for entry in corpus.entries() {
            match build_embedding_input(entry, config) {
                Ok(text) => {
                    ids.push(entry.id.clone());
                    inputs.push(text);
                }
                Err(e) => failures.push((entry.id.clone(), e)),
            }
        }
        let mut vectors = Vec::with_capacity(ids.len());
        for (id, r) in ids.into_iter().zip(self.embed_many(&inputs)) {
            match r {
                Ok(v) => vectors.push((id, v)),
                Err(e) => failures.push((id, e)),
            }
        }
        failures.sort_by(|a, b| a.0.cmp(&b.0));
        EmbedCorpusOutcome { vectors, failures }
    }
}

#[derive(Debug)]
pub struct EmbedCorpusOutcome {
    pub vectors: Vec<(String, EmbeddingVector)>,
    pub failures: Vec<(String, EmbedError)>,
}

/// Embed `text` with `provider` (default truncation budget).
pub fn embed(text: &str, provider: Arc<dyn EmbeddingProvider>) -> Result<EmbeddingVector, EmbedError> {
    Embedder::new(provider).embed(text)
}

pub fn embed_corpus(
    corpus: &Corpus,
    config: &IndexConfig,
    provider: Arc<dyn EmbeddingProvider>,
) -> EmbedCorpusOutcome {
    Embedder::new(provider).embed_corpus(corpus, config)
}
