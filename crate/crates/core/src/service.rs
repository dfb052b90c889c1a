//! HTTP/JSON service: query, browse and add models.
//!
//! Readers clone an `Arc` to the current (corpus, index) snapshot and work on
//! it without holding any lock. Additions are serialized by a writer mutex,
//! computed off to the side, persisted, then swapped in with one pointer store.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::trace::TraceLayer;

use crate::corpus::{self, Corpus, CorpusError, ExpertiseLevel, ModelEntry, SourceFile};
use crate::describe::{DescribeError, Describer};
use crate::embedding::{build_embedding_input, EmbedError, Embedder};
use crate::index::{IndexError, RetrievalIndex, DEFAULT_K};

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub k_default: Option<usize>,
    /// When set, `POST /api/models` requires `Authorization: Bearer <token>`.
    pub admin_token: Option<String>,
    /// Where accepted additions are persisted.
    pub corpus_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    /// Directory of static UI files served at `/`.
    pub static_dir: Option<PathBuf>,
}

struct Snapshot {
    corpus: Corpus,
    index: RetrievalIndex,
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    writer: tokio::sync::Mutex<()>,
    embedder: Embedder,
    describer: Option<Arc<Describer>>,
    options: ServiceOptions,
}

impl AppState {
    /// The index should hold exactly the corpus entries; mismatches are logged.
    pub fn new(
        corpus: Corpus,
        index: RetrievalIndex,
        embedder: Embedder,
        describer: Option<Arc<Describer>>,
        options: ServiceOptions,
    ) -> Self {
        if let Some(w) = index.provider_mismatch(embedder.provider_id()) {
            tracing::warn!("{w}");
        }
        if index.dimension() != embedder.dimension() {
            tracing::warn!(
                index = index.dimension(),
                provider = embedder.dimension(),
                "index and provider dimensions differ; queries will fail"
            );
        }
        let unindexed = corpus.entries().iter().filter(|e| !index.contains(&e.id)).count();
        if unindexed > 0 || index.len() != corpus.len() {
            tracing::warn!(unindexed, corpus = corpus.len(), index = index.len(), "index and corpus disagree");
        }
        Self {
            snapshot: RwLock::new(Arc::new(Snapshot { corpus, index })),
            writer: tokio::sync::Mutex::new(()),
            embedder,
            describer,
            options,
        }
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn k_default(&self) -> usize {
        self.options.k_default.unwrap_or(DEFAULT_K)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.options.static_dir.clone();
    let mut app = Router::new()
        .route("/api/query", post(query))
        .route("/api/models", post(add_model))
        .route("/api/models/{id}", get(get_model))
        .route("/api/health", get(health))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    app.layer(CorsLayer::permissive()).layer(TraceLayer::new_for_http())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.message, status: self.status.as_u16() };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

fn embed_error(e: EmbedError) -> ApiError {
    match e {
        EmbedError::EmptyText | EmbedError::NoTokens => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
        EmbedError::Transport { .. } => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        EmbedError::MissingDescription { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn index_error(e: IndexError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub entry_id: String,
    pub name: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    pub config: String,
    pub provider: String,
    pub results: Vec<QueryHit>,
}

async fn query(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = payload?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "query text is empty"));
    }
    let k = req.k.unwrap_or_else(|| state.k_default());
    if k == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "k must be a positive integer"));
    }
    let snap = state.current();
    let embedder = state.embedder.clone();
    let vector = blocking(move || embedder.embed(&req.text)).await?.map_err(embed_error)?;
    let hits = snap.index.query_top_k(&vector, k).map_err(index_error)?;
    let results = hits
        .into_iter()
        .map(|h| QueryHit {
            name: snap.corpus.get(&h.entry_id).map_or_else(|| h.entry_id.clone(), |e| e.name.clone()),
            entry_id: h.entry_id,
            score: h.score,
            rank: h.rank,
        })
        .collect();
    Ok(Json(QueryResponse {
        config: snap.index.config().name(),
        provider: state.embedder.provider_id().to_string(),
        results,
    }))
}

async fn get_model(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ModelEntry>, ApiError> {
    state
        .current()
        .corpus
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{id}`")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub n: usize,
    pub config: String,
    pub provider: String,
    pub dimension: usize,
    pub corpus_version: u64,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let snap = state.current();
    Json(Health {
        status: "ok".into(),
        n: snap.corpus.len(),
        config: snap.index.config().name(),
        provider: state.embedder.provider_id().to_string(),
        dimension: snap.index.dimension(),
        corpus_version: snap.corpus.version(),
    })
}

/// Payload of `POST /api/models`. Descriptions are optional; missing levels
/// required by the served configuration are generated.
#[derive(Debug, Clone, Deserialize)]
pub struct NewModel {
    pub id: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub provenance: Option<String>,
    pub source_files: Vec<SourceFile>,
    #[serde(default)]
    pub descriptions: std::collections::BTreeMap<ExpertiseLevel, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddSummary {
    pub entry_id: String,
    pub n: usize,
    pub corpus_version: u64,
    pub config: String,
    pub generated_levels: Vec<ExpertiseLevel>,
}

fn authorized(state: &AppState, headers: &HeaderMap) -> bool {
    let Some(token) = &state.options.admin_token else {
        return true;
    };
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

async fn add_model(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<NewModel>, JsonRejection>,
) -> Result<(StatusCode, Json<AddSummary>), ApiError> {
    if !authorized(&state, &headers) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "admin token required"));
    }
    let Json(new) = payload.map_err(|r| match r {
        JsonRejection::JsonDataError(e) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
        other => other.into(),
    })?;
    let mut entry = ModelEntry {
        name: new.name.unwrap_or_else(|| new.id.clone()),
        provenance: new.provenance.unwrap_or_else(|| "unknown".into()),
        id: new.id,
        source_files: new.source_files,
        descriptions: new.descriptions,
    };
    entry.validate().map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;

    let _writer = state.writer.lock().await;
    let snap = state.current();
    if snap.corpus.contains(&entry.id) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("model `{}` already exists", entry.id)));
    }

    let config = snap.index.config().clone();
    let missing: Vec<ExpertiseLevel> = config.levels().filter(|l| entry.description(*l).is_none()).collect();
    if !missing.is_empty() {
        let Some(describer) = state.describer.clone() else {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!(
                    "{} requires {} description(s) and no generation provider is configured",
                    config,
                    missing.iter().map(|l| l.code()).collect::<Vec<_>>().join(",")
                ),
            ));
        };
        let probe = entry.clone();
        let levels = missing.clone();
        let generated = blocking(move || {
            levels
                .into_iter()
                .map(|l| describer.generate_description(&probe, l).map(|r| (l, r.text)))
                .collect::<Result<Vec<_>, DescribeError>>()
        })
        .await?
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
        entry.descriptions.extend(generated);
    }

    let input = build_embedding_input(&entry, &config).map_err(embed_error)?;
    let embedder = state.embedder.clone();
    let vector = blocking(move || embedder.embed(&input)).await?.map_err(|e| match e {
        EmbedError::Transport { .. } => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        other => embed_error(other),
    })?;

    let corpus = snap.corpus.add_entry(entry.clone()).map_err(|e| match e {
        CorpusError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    })?;
    let index = snap.index.with_item(entry.id.clone(), vector).map_err(index_error)?;

    let (corpus_path, index_path) = (state.options.corpus_path.clone(), state.options.index_path.clone());
    let (corpus, index) = blocking(move || -> Result<(Corpus, RetrievalIndex), ApiError> {
        if let Some(p) = &corpus_path {
            corpus::save_corpus(&corpus, p)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        }
        if let Some(p) = &index_path {
            index.save(p).map_err(index_error)?;
        }
        Ok((corpus, index))
    })
    .await??;

    let summary = AddSummary {
        entry_id: entry.id,
        n: corpus.len(),
        corpus_version: corpus.version(),
        config: config.name(),
        generated_levels: missing,
    };
    *state.snapshot.write().expect("snapshot lock") = Arc::new(Snapshot { corpus, index });
    tracing::info!(entry = %summary.entry_id, n = summary.n, "model added");
    Ok((StatusCode::CREATED, Json(summary)))
}
