#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use cpzoo::corpus::{self, Corpus, ExpertiseLevel};
use cpzoo::describe::{Describer, StubGenerator};
use cpzoo::embedding::{Embedder, FallbackEmbedder};
use cpzoo::eval::QuerySet;
use cpzoo::RetryPolicy;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn zoo_dir() -> PathBuf {
    fixtures().join("zoo")
}

/// The fixture corpus with all three description levels filled from the canned mapping.
pub fn zoo_corpus() -> Corpus {
    let corpus = corpus::ingest_directory(&zoo_dir()).expect("fixture ingests");
    let stub = StubGenerator::from_file(&fixtures().join("zoo_descriptions.json")).expect("canned descriptions");
    let describer = Describer::new(Arc::new(stub)).with_retry(RetryPolicy::no_backoff(1));
    let out = describer.generate_all(&corpus, &ExpertiseLevel::ALL, false);
    assert!(out.failures.is_empty());
    out.corpus
}

pub fn zoo_queries() -> QuerySet {
    QuerySet::load_external(&fixtures().join("zoo_queries.json")).expect("fixture queries")
}

pub fn fallback() -> Embedder {
    Embedder::new(Arc::new(FallbackEmbedder::default()))
}

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cpzoo::embedding::IndexConfig;
use cpzoo::service::{self, AppState, ServiceOptions};
use http_body_util::BodyExt;
use tower::ServiceExt;

/// Router over the fixture corpus served with `config` and the fallback embedder.
pub fn zoo_router(config: &str, options: ServiceOptions, describer: Option<Arc<Describer>>) -> Router {
    let corpus = zoo_corpus();
    let embedder = fallback();
    let config: IndexConfig = config.parse().unwrap();
    let index = cpzoo::eval::build_index(&corpus, &config, &embedder).unwrap();
    service::router(Arc::new(AppState::new(corpus, index, embedder, describer, options)))
}

pub async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<serde_json::Value>,
    headers: &[(&str, &str)],
) -> (StatusCode, serde_json::Value) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|e| panic!("{method} {uri}: non-JSON body ({e}): {}", String::from_utf8_lossy(&bytes)));
    (status, value)
}
