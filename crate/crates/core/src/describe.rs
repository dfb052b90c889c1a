//! Novice / Intermediate / Expert problem descriptions generated from model source.
//!
//! Prompts are rendered from the shipped templates in `prompts/`, sent to a
//! [`TextGenerator`], and cached under `(entry id, level, sha256(prompt))`, so
//! editing a template or a source file invalidates exactly the affected
//! generations.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, ExpertiseLevel, ModelEntry};
use crate::util::{self, HttpFailure, RetryPolicy};

pub const PLACEHOLDER: &str = "{source_code}";

const NOVICE: &str = include_str!("../prompts/novice.txt");
const INTERMEDIATE: &str = include_str!("../prompts/intermediate.txt");
const EXPERT: &str = include_str!("../prompts/expert.txt");

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Entry(#[from] CorpusError),
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("provider returned an empty description for `{entry_id}` ({level})")]
    Empty { entry_id: String, level: ExpertiseLevel },
    #[error("generation cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

impl DescribeError {
    pub fn is_transport(&self) -> bool {
        matches!(self, DescribeError::Transport { .. })
    }
}

/// A prompt with exactly one `{source_code}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    level: ExpertiseLevel,
    text: String,
}

impl PromptTemplate {
    pub fn new(level: ExpertiseLevel, text: impl Into<String>) -> Result<Self, DescribeError> {
        let text = text.into();
        let count = text.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(DescribeError::Template(format!(
                "{} template must contain {PLACEHOLDER} exactly once (found {count})",
                level.name()
            )));
        }
        Ok(Self { level, text })
    }

    /// The shipped template for `level`.
    pub fn builtin(level: ExpertiseLevel) -> Self {
        let text = match level {
            ExpertiseLevel::Novice => NOVICE,
            ExpertiseLevel::Intermediate => INTERMEDIATE,
            ExpertiseLevel::Expert => EXPERT,
        };
        Self { level, text: text.to_string() }
    }

    pub fn level(&self) -> ExpertiseLevel {
        self.level
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitute the placeholder with `source` verbatim.
    pub fn fill(&self, source: &str) -> String {
        self.text.replacen(PLACEHOLDER, source, 1)
    }

    pub fn render(&self, entry: &ModelEntry) -> Result<String, DescribeError> {
        entry.validate()?;
        Ok(self.fill(&entry.concatenated_source()))
    }
}

/// Render the built-in prompt for `level` with the entry's source files inlined.
pub fn render_prompt(entry: &ModelEntry, level: ExpertiseLevel) -> Result<String, DescribeError> {
    PromptTemplate::builtin(level).render(entry)
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub entry_id: String,
    pub level: ExpertiseLevel,
    pub prompt: String,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub provider_id: String,
    pub timestamp: String,
    pub prompt_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying: connection failures, timeouts, overload.
    Transport(String),
    Fatal(String),
}

/// Something that turns a rendered prompt into text.
pub trait TextGenerator: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest) -> Result<String, ProviderError>;
}

/// Deterministic generator for tests and offline pipelines.
///
/// Returns canned text for known `(entry id, level)` pairs and otherwise a line
/// derived from the prompt digest.
#[derive(Debug, Default)]
pub struct StubGenerator {
    canned: HashMap<(String, ExpertiseLevel), String>,
    calls: AtomicUsize,
}

impl StubGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_canned(mut self, entry_id: &str, level: ExpertiseLevel, text: &str) -> Self {
        self.canned.insert((entry_id.to_string(), level), text.to_string());
        self
    }

    /// Load a canned mapping `{"<entry id>": {"D1": "...", ...}}`.
    pub fn from_file(path: &Path) -> Result<Self, DescribeError> {
        let text = fs::read_to_string(path).map_err(|e| DescribeError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let map: BTreeMap<String, BTreeMap<ExpertiseLevel, String>> = serde_json::from_str(&text)
            .map_err(|e| DescribeError::Cache { path: path.to_path_buf(), message: e.to_string() })?;
        let mut stub = Self::new();
        for (id, levels) in map {
            for (level, text) in levels {
                stub.canned.insert((id.clone(), level), text);
            }
        }
        Ok(stub)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextGenerator for StubGenerator {
    fn id(&self) -> &str {
        "stub"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(text) = self.canned.get(&(request.entry_id.clone(), request.level)) {
            return Ok(text.clone());
        }
        let digest = prompt_digest(&request.prompt);
        Ok(format!(
            "{} description of {} ({})",
            request.level.name(),
            request.entry_id,
            &digest[..16]
        ))
    }
}

/// Connection settings for an OpenAI-style chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteGeneratorConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

pub struct RemoteGenerator {
    config: RemoteGeneratorConfig,
    id: String,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(config: RemoteGeneratorConfig) -> Self {
        let agent = util::http_agent(Duration::from_secs(config.timeout_secs));
        let id = format!("remote:{}", config.model);
        Self { config, id, agent }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    #[serde(default)]
    content: Option<String>,
}

impl TextGenerator for RemoteGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage { role: "user", content: &request.prompt }],
            temperature: self.config.temperature,
        };
        let token = util::token_from_env(self.config.api_key_env.as_deref());
        let resp: ChatResponse = util::post_json(&self.agent, &self.config.endpoint, token.as_deref(), &body)
            .map_err(|e| match e {
                HttpFailure::Transport(m) => ProviderError::Transport(m),
                HttpFailure::Protocol(m) => ProviderError::Fatal(m),
            })?;
        Ok(resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
struct CacheKey {
    entry_id: String,
    level: ExpertiseLevel,
    prompt_digest: String,
}

/// Thread-safe generation cache, optionally backed by a JSON file.
#[derive(Debug, Default)]
pub struct GenerationCache {
    map: Mutex<HashMap<CacheKey, GenerationResult>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    entry_id: String,
    level: ExpertiseLevel,
    result: GenerationResult,
}

impl GenerationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load a cache file; a missing file gives an empty cache.
    pub fn load(path: &Path) -> Result<Self, DescribeError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => {
                return Err(DescribeError::Cache { path: path.to_path_buf(), message: e.to_string() })
            }
        };
        let records: Vec<CacheRecord> = serde_json::from_str(&text)
            .map_err(|e| DescribeError::Cache { path: path.to_path_buf(), message: e.to_string() })?;
        let map = records
            .into_iter()
            .map(|r| {
                let key = CacheKey {
                    entry_id: r.entry_id,
                    level: r.level,
                    prompt_digest: r.result.prompt_digest.clone(),
                };
                (key, r.result)
            })
            .collect();
        Ok(Self { map: Mutex::new(map) })
    }

    pub fn save(&self, path: &Path) -> Result<(), DescribeError> {
        let mut records: Vec<CacheRecord> = {
            let map = self.map.lock().unwrap();
            map.iter()
                .map(|(k, v)| CacheRecord { entry_id: k.entry_id.clone(), level: k.level, result: v.clone() })
                .collect()
        };
        records.sort_by(|a, b| {
            (&a.entry_id, a.level, &a.result.prompt_digest).cmp(&(&b.entry_id, b.level, &b.result.prompt_digest))
        });
        let text = serde_json::to_string_pretty(&records).expect("cache serializes");
        util::write_atomic(path, text.as_bytes())
            .map_err(|e| DescribeError::Cache { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<GenerationResult> {
        self.map.lock().unwrap().get(key).cloned()
    }

    fn insert(&self, key: CacheKey, result: GenerationResult) {
        self.map.lock().unwrap().insert(key, result);
    }
}

/// Failure of one `(entry, level)` generation inside a batch.
#[derive(Debug)]
pub struct GenerationFailure {
    pub entry_id: String,
    pub level: ExpertiseLevel,
    pub error: DescribeError,
}

#[derive(Debug)]
pub struct GenerateAllOutcome {
    /// Corpus with every successful generation merged in. Unchanged (same
    /// version) when nothing new was generated.
    pub corpus: Corpus,
    pub generated: usize,
    pub failures: Vec<GenerationFailure>,
}

/// Drives a [`TextGenerator`] with caching, retries and bounded parallelism.
pub struct Describer {
    provider: Arc<dyn TextGenerator>,
    cache: Arc<GenerationCache>,
    retry: RetryPolicy,
    parallelism: usize,
}

impl Describer {
    pub fn new(provider: Arc<dyn TextGenerator>) -> Self {
        Self {
            provider,
            cache: Arc::new(GenerationCache::new()),
            retry: RetryPolicy::default(),
            parallelism: 4,
        }
    }

    pub fn with_cache(mut self, cache: Arc<GenerationCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn cache(&self) -> &Arc<GenerationCache> {
        &self.cache
    }

    pub fn generate_description(
        &self,
        entry: &ModelEntry,
        level: ExpertiseLevel,
    ) -> Result<GenerationResult, DescribeError> {
        self.generate(entry, level, false)
    }

    fn generate(
        &self,
        entry: &ModelEntry,
        level: ExpertiseLevel,
        bypass_cache: bool,
    ) -> Result<GenerationResult, DescribeError> {
        let prompt = render_prompt(entry, level)?;
        let digest = prompt_digest(&prompt);
        let key = CacheKey { entry_id: entry.id.clone(), level, prompt_digest: digest.clone() };
        if !bypass_cache {
            if let Some(hit) = self.cache.get(&key) {
                return Ok(hit);
            }
        }

        let request = GenerationRequest {
            entry_id: entry.id.clone(),
            level,
            prompt,
            provider_id: self.provider.id().to_string(),
        };
        let raw = self
            .retry
            .run(|| self.provider.generate(&request), |e| matches!(e, ProviderError::Transport(_)))
            .map_err(|(e, attempts)| match e {
                ProviderError::Transport(message) => DescribeError::Transport { attempts, message },
                ProviderError::Fatal(message) => DescribeError::Provider(message),
            })?;
        let text = raw.trim();
        if text.is_empty() {
            return Err(DescribeError::Empty { entry_id: entry.id.clone(), level });
        }
        let result = GenerationResult {
            text: text.to_string(),
            provider_id: request.provider_id,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            prompt_digest: digest,
        };
        self.cache.insert(key, result.clone());
        Ok(result)
    }

    /// Fill in the requested levels for every entry. Existing descriptions are
    /// kept unless `force` is set, in which case the cache is bypassed too.
    pub fn generate_all(
        &self,
        corpus: &Corpus,
        levels: &[ExpertiseLevel],
        force: bool,
    ) -> GenerateAllOutcome {
        let jobs: Vec<(&ModelEntry, ExpertiseLevel)> = corpus
            .entries()
            .iter()
            .flat_map(|e| levels.iter().map(move |&l| (e, l)))
            .filter(|(e, l)| force || e.description(*l).is_none())
            .collect();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism)
            .build()
            .expect("thread pool");
        let results: Vec<_> = pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter()
                .map(|&(entry, level)| (entry.id.clone(), level, self.generate(entry, level, force)))
                .collect()
        });

        let mut updates = Vec::new();
        let mut failures = Vec::new();
        for (entry_id, level, result) in results {
            match result {
                Ok(r) => updates.push((entry_id, level, r.text)),
                Err(error) => {
                    tracing::warn!(entry = %entry_id, %level, %error, "description generation failed");
                    failures.push(GenerationFailure { entry_id, level, error })
                }
            }
        }
        let generated = updates.len();
        let corpus = if updates.is_empty() {
            corpus.clone()
        } else {
            corpus
                .with_descriptions(updates)
                .expect("generated descriptions are non-empty and keyed by existing ids")
        };
        GenerateAllOutcome { corpus, generated, failures }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceFile;

    fn knapsack() -> ModelEntry {
        ModelEntry::new(
            "knapsack",
            vec![SourceFile::new("knapsack.mzn", "int: capacity;\nvar 0..1: x;\n")],
        )
    }

    fn describer(provider: Arc<dyn TextGenerator>) -> Describer {
        Describer::new(provider).with_retry(RetryPolicy::no_backoff(3))
    }

    #[test]
    fn render_inlines_source() {
        let p = render_prompt(&knapsack(), ExpertiseLevel::Novice).unwrap();
        assert!(p.contains("% file: knapsack.mzn\nint: capacity;\nvar 0..1: x;"));
        assert!(p.contains("using very \n    simple language"));
        assert!(!p.contains(PLACEHOLDER));
    }

    #[test]
    fn render_keeps_file_order() {
        let e = ModelEntry::new(
            "two",
            vec![SourceFile::new("a.mzn", "% first"), SourceFile::new("b.mzn", "% second")],
        );
        let p = render_prompt(&e, ExpertiseLevel::Expert).unwrap();
        let a = p.find("% file: a.mzn").unwrap();
        let b = p.find("% file: b.mzn").unwrap();
        assert!(a < b);
    }

    #[test]
    fn template_requires_single_placeholder() {
        assert!(PromptTemplate::new(ExpertiseLevel::Novice, "no placeholder").is_err());
        assert!(PromptTemplate::new(ExpertiseLevel::Novice, "{source_code} {source_code}").is_err());
        assert!(PromptTemplate::new(ExpertiseLevel::Novice, "x {source_code}").is_ok());
        for level in ExpertiseLevel::ALL {
            let t = PromptTemplate::builtin(level);
            assert!(PromptTemplate::new(level, t.text()).is_ok());
        }
    }

    #[test]
    fn stub_text_is_returned_and_cached() {
        let stub = Arc::new(StubGenerator::new().with_canned("knapsack", ExpertiseLevel::Expert, "  0/1 knapsack \n"));
        let d = describer(stub.clone());
        let r = d.generate_description(&knapsack(), ExpertiseLevel::Expert).unwrap();
        assert_eq!(r.text, "0/1 knapsack");
        assert_eq!(r.provider_id, "stub");
        assert_eq!(r.prompt_digest, prompt_digest(&render_prompt(&knapsack(), ExpertiseLevel::Expert).unwrap()));
        assert_eq!(stub.calls(), 1);

        let again = d.generate_description(&knapsack(), ExpertiseLevel::Expert).unwrap();
        assert_eq!(again, r);
        assert_eq!(stub.calls(), 1);
    }

    #[test]
    fn source_edit_invalidates_cache() {
        let stub = Arc::new(StubGenerator::new());
        let d = describer(stub.clone());
        d.generate_description(&knapsack(), ExpertiseLevel::Novice).unwrap();
        let mut edited = knapsack();
        edited.source_files[0].content.push_str("constraint x <= 1;\n");
        d.generate_description(&edited, ExpertiseLevel::Novice).unwrap();
        assert_eq!(stub.calls(), 2);
    }

    type Reply = Box<dyn Fn(&GenerationRequest) -> Result<String, ProviderError> + Send + Sync>;

    struct Scripted {
        reply: Reply,
        calls: AtomicUsize,
    }

    impl TextGenerator for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }
        fn generate(&self, r: &GenerationRequest) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.reply)(r)
        }
    }

    fn scripted(
        f: impl Fn(&GenerationRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Arc<Scripted> {
        Arc::new(Scripted { reply: Box::new(f), calls: AtomicUsize::new(0) })
    }

    #[test]
    fn empty_output_is_an_error() {
        let p = scripted(|_| Ok("   \n".into()));
        let err = describer(p).generate_description(&knapsack(), ExpertiseLevel::Novice).unwrap_err();
        assert!(matches!(err, DescribeError::Empty { .. }));
    }

    #[test]
    fn transport_failures_are_retried_three_times() {
        let p = scripted(|_| Err(ProviderError::Transport("connection refused".into())));
        let err = describer(p.clone())
            .generate_description(&knapsack(), ExpertiseLevel::Novice)
            .unwrap_err();
        assert!(matches!(err, DescribeError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn flaky_provider_recovers() {
        let p = scripted(|_| Ok("fine".into()));
        let flaky_calls = Arc::new(AtomicUsize::new(0));
        let fc = flaky_calls.clone();
        let flaky = scripted(move |r| {
            if fc.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(ProviderError::Transport("timeout".into()))
            } else {
                p.generate(r)
            }
        });
        let r = describer(flaky).generate_description(&knapsack(), ExpertiseLevel::Novice).unwrap();
        assert_eq!(r.text, "fine");
        assert_eq!(flaky_calls.load(Ordering::SeqCst), 2);
    }

    fn two_entry_corpus() -> Corpus {
        Corpus::from_entries(
            1,
            vec![knapsack(), ModelEntry::new("queens", vec![SourceFile::new("q.mzn", "int: n;")])],
        )
        .unwrap()
    }

    #[test]
    fn generate_all_counts_and_is_idempotent() {
        let stub = Arc::new(StubGenerator::new());
        let d = describer(stub.clone());
        let levels = [ExpertiseLevel::Novice, ExpertiseLevel::Intermediate];
        let out = d.generate_all(&two_entry_corpus(), &levels, false);
        assert_eq!(stub.calls(), 4);
        assert_eq!(out.generated, 4);
        assert!(out.failures.is_empty());
        assert_eq!(out.corpus.version(), 2);
        for e in out.corpus.entries() {
            for l in levels {
                assert!(e.description(l).is_some());
            }
        }

        let again = d.generate_all(&out.corpus, &levels, false);
        assert_eq!(stub.calls(), 4);
        assert_eq!(again.generated, 0);
        assert_eq!(again.corpus, out.corpus);
    }

    #[test]
    fn force_regenerates() {
        let stub = Arc::new(StubGenerator::new());
        let d = describer(stub.clone());
        let out = d.generate_all(&two_entry_corpus(), &[ExpertiseLevel::Expert], false);
        d.generate_all(&out.corpus, &[ExpertiseLevel::Expert], true);
        assert_eq!(stub.calls(), 4);
    }

    #[test]
    fn generate_all_reports_partial_failure() {
        let p = scripted(|r| {
            if r.entry_id == "queens" {
                Err(ProviderError::Fatal("refused".into()))
            } else {
                Ok("a bag of items".into())
            }
        });
        let out = describer(p).generate_all(&two_entry_corpus(), &[ExpertiseLevel::Novice], false);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].entry_id, "queens");
        assert_eq!(out.corpus.get("knapsack").unwrap().description(ExpertiseLevel::Novice), Some("a bag of items"));
        assert_eq!(out.corpus.get("queens").unwrap().description(ExpertiseLevel::Novice), None);
    }

    #[test]
    fn cache_persists() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cache.json");
        let stub = Arc::new(StubGenerator::new());
        let d = describer(stub.clone());
        d.generate_description(&knapsack(), ExpertiseLevel::Novice).unwrap();
        d.cache().save(&path).unwrap();

        let stub2 = Arc::new(StubGenerator::new());
        let d2 = describer(stub2.clone()).with_cache(Arc::new(GenerationCache::load(&path).unwrap()));
        d2.generate_description(&knapsack(), ExpertiseLevel::Novice).unwrap();
        assert_eq!(stub2.calls(), 0);
    }
}
