//! Leave-one-out retrieval evaluation: query sets, truncated MRR, and the
//! query-set × index-configuration table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ExpertiseLevel};
use crate::embedding::{EmbedError, Embedder, EmbeddingVector, IndexConfig};
use crate::index::{IndexError, RankedResult, RetrievalIndex};

/// How ranks beyond the cutoff are scored; recorded in every report.
pub const RR_CONVENTION: &str = "reciprocal rank is 1/rank when the truth is ranked within the top k, 0 otherwise";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query set {query_set} cannot be evaluated against {config}: the index contains the query's own description level")]
    LooViolation { query_set: String, config: String },
    #[error("cannot average an empty list of ranks")]
    EmptyRanks,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("query set {path}: {message}")]
    QuerySetFile { path: String, message: String },
}

/// Which kind of queries a row holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuerySetKind {
    /// Generated descriptions at one level; the truth is the owning entry.
    Level(ExpertiseLevel),
    /// Human-written descriptions supplied from a file.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    #[serde(default)]
    pub truth_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub name: String,
    pub kind: QuerySetKind,
    pub queries: Vec<Query>,
}

#[derive(Deserialize)]
struct QuerySetFile {
    name: String,
    queries: Vec<Query>,
}

impl QuerySet {
    /// The corpus's descriptions at `level`, each targeting its own entry.
    pub fn from_level(corpus: &Corpus, level: ExpertiseLevel) -> Self {
        let queries = corpus
            .entries()
            .iter()
            .filter_map(|e| {
                e.description(level).map(|t| Query { text: t.to_string(), truth_id: Some(e.id.clone()) })
            })
            .collect();
        Self { name: level.code().to_string(), kind: QuerySetKind::Level(level), queries }
    }

    pub fn external(name: impl Into<String>, queries: Vec<Query>) -> Self {
        Self { name: name.into(), kind: QuerySetKind::External, queries }
    }

    /// Load `{"name": ..., "queries": [{"text": ..., "truth_id": ... | null}]}`.
    pub fn load_external(path: &Path) -> Result<Self, EvalError> {
        let err = |message: String| EvalError::QuerySetFile { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: QuerySetFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if let Some(i) = file.queries.iter().position(|q| q.text.trim().is_empty()) {
            return Err(err(format!("query {i} has empty text")));
        }
        Ok(Self::external(file.name, file.queries))
    }
}

/// `1/rank` when `rank <= k`, otherwise 0.
pub fn reciprocal_rank(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

pub fn mean_reciprocal_rank(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyRanks);
    }
    let total: f64 = ranks.iter().map(|&r| reciprocal_rank(r, k)).sum();
    Ok(total / ranks.len() as f64)
}

/// Leave-one-out rule: a generated-level query set may not be matched against
/// an index built from that same level.
pub fn loo_admissible(kind: QuerySetKind, config: &IndexConfig) -> bool {
    match kind {
        QuerySetKind::Level(level) => !config.contains(level),
        QuerySetKind::External => true,
    }
}

/// Reference dash cells: for each generated level row, the four columns
/// containing that level. The human-description row has none.
const REFERENCE_DASHES: [(&str, [&str; 4]); 3] = [
    ("D1", ["SC+D1", "SC+D1&2", "SC+D1&3", "SC+D1&2&3"]),
    ("D2", ["SC+D2", "SC+D1&2", "SC+D2&3", "SC+D1&2&3"]),
    ("D3", ["SC+D3", "SC+D1&3", "SC+D2&3", "SC+D1&2&3"]),
];

/// Whether the reference results layout shows a value (not a dash) at this cell.
pub fn reference_admissible(kind: QuerySetKind, config: &IndexConfig) -> bool {
    match kind {
        QuerySetKind::External => true,
        QuerySetKind::Level(level) => {
            let name = config.name();
            REFERENCE_DASHES
                .iter()
                .find(|(row, _)| *row == level.code())
                .is_none_or(|(_, dashes)| !dashes.contains(&name.as_str()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    /// Some queries could not be embedded.
    Partial,
    /// The cell could not be computed at all.
    Unavailable,
}

/// A query excluded from the MRR (no truth id, or truth absent from the index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnresolvedQuery {
    pub query_index: usize,
    pub truth_id: Option<String>,
    pub reason: String,
    pub top_k: Vec<RankedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCell {
    pub query_set: String,
    pub config: String,
    pub status: CellStatus,
    /// `None` when no query could be scored.
    pub mrr: Option<f64>,
    /// Queries contributing to the MRR.
    pub n_queries: usize,
    /// Full-ordering rank of the truth for each scored query, in query order.
    pub ranks: Vec<usize>,
    pub unresolved: Vec<UnresolvedQuery>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<QueryFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl EvaluationCell {
    fn unavailable(query_set: &str, config: &IndexConfig, reason: String) -> Self {
        Self {
            query_set: query_set.to_string(),
            config: config.name(),
            status: CellStatus::Unavailable,
            mrr: None,
            n_queries: 0,
            ranks: Vec::new(),
            unresolved: Vec::new(),
            failures: Vec::new(),
            reason: Some(reason),
        }
    }
}

/// Embed every query once; failures are kept per query.
fn embed_queries(set: &QuerySet, embedder: &Embedder) -> Vec<Result<EmbeddingVector, EmbedError>> {
    let texts: Vec<String> = set.queries.iter().map(|q| q.text.clone()).collect();
    embedder.embed_many(&texts)
}

/// Build the index for `config`, or explain why it cannot be built.
pub fn build_index(corpus: &Corpus, config: &IndexConfig, embedder: &Embedder) -> Result<RetrievalIndex, EvalError> {
    let missing: Vec<&str> = corpus
        .entries()
        .iter()
        .filter(|e| config.levels().any(|l| e.description(l).is_none()))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::Unavailable(format!(
            "{} of {} entries lack descriptions required by {config} (first: {})",
            missing.len(),
            corpus.len(),
            missing[0]
        )));
    }
    let outcome = embedder.embed_corpus(corpus, config);
    if let Some((id, e)) = outcome.failures.first() {
        return Err(EvalError::Unavailable(format!(
            "{} entries failed to embed for {config} (first: {id}: {e})",
            outcome.failures.len()
        )));
    }
    Ok(RetrievalIndex::build(
        config.clone(),
        embedder.provider_id(),
        embedder.dimension(),
        outcome.vectors,
    )?)
}

fn score_cell(
    set: &QuerySet,
    vectors: &[Result<EmbeddingVector, EmbedError>],
    index: &RetrievalIndex,
    k: usize,
) -> Result<EvaluationCell, EvalError> {
    let mut ranks = Vec::new();
    let mut unresolved = Vec::new();
    let mut failures = Vec::new();
    for (i, (query, vector)) in set.queries.iter().zip(vectors).enumerate() {
        let vector = match vector {
            Ok(v) => v,
            Err(e) => {
                failures.push(QueryFailure { query_index: i, error: e.to_string() });
                continue;
            }
        };
        let rank = match &query.truth_id {
            Some(t) => index.rank_of(vector, t)?,
            None => None,
        };
        match rank {
            Some(r) => ranks.push(r),
            None => unresolved.push(UnresolvedQuery {
                query_index: i,
                truth_id: query.truth_id.clone(),
                reason: if query.truth_id.is_some() {
                    "truth entry not in index".into()
                } else {
                    "no truth id".into()
                },
                top_k: index.query_top_k(vector, k)?,
            }),
        }
    }
    let as_options: Vec<Option<usize>> = ranks.iter().copied().map(Some).collect();
    let mrr = if as_options.is_empty() { None } else { Some(mean_reciprocal_rank(&as_options, k)?) };
    Ok(EvaluationCell {
        query_set: set.name.clone(),
        config: index.config().name(),
        status: if failures.is_empty() { CellStatus::Ok } else { CellStatus::Partial },
        mrr,
        n_queries: ranks.len(),
        ranks,
        unresolved,
        failures,
        reason: None,
    })
}

/// Evaluate one query set against one index configuration.
pub fn run_cell(
    corpus: &Corpus,
    set: &QuerySet,
    config: &IndexConfig,
    embedder: &Embedder,
    k: usize,
) -> Result<EvaluationCell, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if !loo_admissible(set.kind, config) {
        return Err(EvalError::LooViolation { query_set: set.name.clone(), config: config.name() });
    }
    let index = build_index(corpus, config, embedder)?;
    let vectors = embed_queries(set, embedder);
    score_cell(set, &vectors, &index, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub query_set: String,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub provider_id: String,
    pub dimension: usize,
    pub k: usize,
    pub timestamp: String,
    pub corpus_version: u64,
    pub n_entries: usize,
    pub reciprocal_rank_convention: String,
    pub rows: Vec<String>,
    pub configs: Vec<String>,
    /// Cells excluded by the leave-one-out rule (rendered as dashes).
    pub excluded: Vec<CellRef>,
    /// Cells where the leave-one-out rule and the reference dash layout disagree.
    pub layout_divergences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metadata: ReportMetadata,
    pub cells: Vec<EvaluationCell>,
}

impl EvaluationReport {
    pub fn cell(&self, query_set: &str, config: &str) -> Option<&EvaluationCell> {
        self.cells.iter().find(|c| c.query_set == query_set && c.config == config)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table; `-` marks excluded cells, `n/a` unavailable ones,
    /// and a trailing `*` partial ones.
    pub fn render_text(&self) -> String {
        let label_w = self.metadata.rows.iter().map(String::len).max().unwrap_or(5).max(5);
        let col_w = self.metadata.configs.iter().map(String::len).max().unwrap_or(6).max(7);
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "Query");
        for c in &self.metadata.configs {
            let _ = write!(out, "  {c:>col_w$}");
        }
        out.push('\n');
        for row in &self.metadata.rows {
            let _ = write!(out, "{row:<label_w$}");
            for config in &self.metadata.configs {
                let text = match self.cell(row, config) {
                    None => "-".to_string(),
                    Some(c) => match (c.status, c.mrr) {
                        (CellStatus::Unavailable, _) | (_, None) => "n/a".to_string(),
                        (CellStatus::Partial, Some(m)) => format!("{m:.4}*"),
                        (CellStatus::Ok, Some(m)) => format!("{m:.4}"),
                    },
                };
                let _ = write!(out, "  {text:>col_w$}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\nk = {}, provider = {}, {} entries. {}.",
            self.metadata.k, self.metadata.provider_id, self.metadata.n_entries, RR_CONVENTION
        );
        for c in self.cells.iter().filter(|c| c.status == CellStatus::Unavailable) {
            let _ = writeln!(
                out,
                "n/a {} x {}: {}",
                c.query_set,
                c.config,
                c.reason.as_deref().unwrap_or("unavailable")
            );
        }
        for d in &self.metadata.layout_divergences {
            let _ = writeln!(out, "layout divergence: {d}");
        }
        out
    }
}

/// Evaluate every requested row against every configuration.
///
/// Each configuration's index is built once and each query set embedded once.
/// Cells excluded by the leave-one-out rule are listed in the metadata;
/// cells that cannot be computed are reported as unavailable with a reason.
pub fn run_table(
    corpus: &Corpus,
    rows: &[QuerySet],
    configs: &[IndexConfig],
    embedder: &Embedder,
    k: usize,
) -> Result<EvaluationReport, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let query_vectors: Vec<_> = rows.iter().map(|set| embed_queries(set, embedder)).collect();

    let mut excluded = Vec::new();
    let mut layout_divergences = Vec::new();
    let mut cells = Vec::new();
    for config in configs {
        let needed = rows.iter().any(|set| loo_admissible(set.kind, config));
        let index = if needed { Some(build_index(corpus, config, embedder)) } else { None };
        for (set, vectors) in rows.iter().zip(&query_vectors) {
            let ours = loo_admissible(set.kind, config);
            if ours != reference_admissible(set.kind, config) {
                layout_divergences.push(format!(
                    "{} x {}: {} here, {} in the reference layout",
                    set.name,
                    config,
                    if ours { "evaluated" } else { "excluded" },
                    if ours { "dash" } else { "value" }
                ));
            }
            if !ours {
                excluded.push(CellRef { query_set: set.name.clone(), config: config.name() });
                continue;
            }
            let cell = match index.as_ref().expect("index built for admissible cells") {
                Err(e) => EvaluationCell::unavailable(&set.name, config, e.to_string()),
                Ok(_) if set.queries.is_empty() => {
                    EvaluationCell::unavailable(&set.name, config, format!("query set {} is empty", set.name))
                }
                Ok(index) => score_cell(set, vectors, index, k)?,
            };
            cells.push(cell);
        }
    }

    // row-major cell order
    let row_pos = |name: &str| rows.iter().position(|r| r.name == name).unwrap_or(usize::MAX);
    let col_pos = |name: &str| configs.iter().position(|c| c.name() == name).unwrap_or(usize::MAX);
    cells.sort_by_key(|c| (row_pos(&c.query_set), col_pos(&c.config)));
    excluded.sort_by_key(|c| (row_pos(&c.query_set), col_pos(&c.config)));

    Ok(EvaluationReport {
        metadata: ReportMetadata {
            provider_id: embedder.provider_id().to_string(),
            dimension: embedder.dimension(),
            k,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            corpus_version: corpus.version(),
            n_entries: corpus.len(),
            reciprocal_rank_convention: RR_CONVENTION.to_string(),
            rows: rows.iter().map(|r| r.name.clone()).collect(),
            configs: configs.iter().map(IndexConfig::name).collect(),
            excluded,
            layout_divergences,
        },
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExpertiseLevel::*;

    fn cfg(s: &str) -> IndexConfig {
        s.parse().unwrap()
    }

    #[test]
    fn reciprocal_rank_examples() {
        assert_eq!(reciprocal_rank(Some(1), 5), 1.0);
        assert_eq!(reciprocal_rank(Some(4), 5), 0.25);
        assert_eq!(reciprocal_rank(Some(6), 5), 0.0);
        assert_eq!(reciprocal_rank(None, 5), 0.0);
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mean_reciprocal_rank(&[Some(1), Some(1), Some(1)], 5).unwrap(), 1.0);
        let m = mean_reciprocal_rank(&[Some(1), Some(2), Some(4)], 5).unwrap();
        assert!((m - 0.583_333_333_333_333_3).abs() < 1e-9);
        assert_eq!(mean_reciprocal_rank(&[None], 5).unwrap(), 0.0);
        assert!(matches!(mean_reciprocal_rank(&[], 5), Err(EvalError::EmptyRanks)));
    }

    #[test]
    fn loo_examples() {
        assert!(loo_admissible(QuerySetKind::Level(Novice), &cfg("SC+D2&3")));
        assert!(!loo_admissible(QuerySetKind::Level(Novice), &cfg("SC+D1")));
        assert!(loo_admissible(QuerySetKind::External, &cfg("SC+D1&2&3")));
    }

    #[test]
    fn loo_matches_reference_layout() {
        let kinds = [
            QuerySetKind::Level(Novice),
            QuerySetKind::Level(Intermediate),
            QuerySetKind::Level(Expert),
            QuerySetKind::External,
        ];
        for kind in kinds {
            for c in IndexConfig::all() {
                assert_eq!(loo_admissible(kind, &c), reference_admissible(kind, &c), "{kind:?} {c}");
            }
        }
    }
}
