//! `cpzoo` command line: ingest → describe → embed → query / eval / serve.
//!
//! Exit codes: 0 success, 1 validation error, 2 provider or transport error,
//! 3 partial batch failure.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{self, Corpus, CorpusError, ExpertiseLevel};
use crate::describe::{DescribeError, Describer, GenerationCache, RemoteGenerator, StubGenerator, TextGenerator};
use crate::embedding::{EmbedError, Embedder, EmbeddingProvider, FallbackEmbedder, IndexConfig, RemoteEmbedder};
use crate::eval::{self, EvalError, QuerySet};
use crate::index::{IndexError, RetrievalIndex, DEFAULT_K};
use crate::service::{self, AppState, ServiceOptions};
use crate::settings::Settings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cpzoo", version, about = "Find constraint-programming models by describing your problem")]
pub struct Cli {
    /// TOML settings file with provider endpoints, dimensions and credential variables.
    #[arg(long, global = true)]
    pub settings: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedProviderKind {
    Fallback,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Stub,
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a directory tree (one subdirectory per problem) into a corpus file.
    Ingest {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Generate descriptions for corpus entries.
    Describe {
        #[arg(long)]
        corpus: PathBuf,
        /// Output corpus (defaults to overwriting --corpus).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "D1,D2,D3")]
        levels: String,
        /// Regenerate descriptions that already exist.
        #[arg(long)]
        force: bool,
        #[arg(long, value_enum, default_value = "remote")]
        provider: GeneratorKind,
        /// Canned `{"<id>": {"D1": "..."}}` mapping for the stub provider.
        #[arg(long)]
        canned: Option<PathBuf>,
        /// Generation cache file.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Embed every corpus entry under one index configuration.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "SC+D2")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "fallback")]
        provider: EmbedProviderKind,
        /// Fallback embedder dimension.
        #[arg(long)]
        dimension: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Rank indexed models against a problem description.
    Query {
        text: String,
        #[arg(long)]
        index: PathBuf,
        /// Corpus file, for display names.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fallback")]
        provider: EmbedProviderKind,
        #[arg(short = 'k', long = "k", default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Leave-one-out MRR table over query sets and index configurations.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "fallback")]
        provider: EmbedProviderKind,
        /// Rows: any of D1, D2, D3, External.
        #[arg(long)]
        rows: Option<String>,
        /// Comma separated config names, or `all`.
        #[arg(long, default_value = "all")]
        configs: String,
        /// External query set JSON file.
        #[arg(long)]
        external: Option<PathBuf>,
        #[arg(short = 'k', long = "k", default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        dimension: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        /// Prebuilt index; built from the corpus at startup when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value = "SC+D2")]
        config: String,
        #[arg(long, value_enum, default_value = "fallback")]
        provider: EmbedProviderKind,
        /// Description generator for added models.
        #[arg(long, value_enum)]
        generator: Option<GeneratorKind>,
        #[arg(long)]
        canned: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_K)]
        k_default: usize,
        /// Environment variable holding the admin token for POST /api/models.
        #[arg(long)]
        admin_token_env: Option<String>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        dimension: Option<usize>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Provider(String),
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Provider(_) => EXIT_PROVIDER,
            CliError::Partial(_) => EXIT_PARTIAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Provider(m) | CliError::Partial(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        if e.is_transport() {
            CliError::Provider(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<DescribeError> for CliError {
    fn from(e: DescribeError) -> Self {
        match e {
            DescribeError::Transport { .. } | DescribeError::Provider(_) | DescribeError::Empty { .. } => {
                CliError::Provider(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

/// Parse `argv` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn load_settings(path: Option<&Path>) -> Result<Settings, CliError> {
    match path {
        Some(p) => Settings::load(p).map_err(CliError::Validation),
        None => Ok(Settings::default()),
    }
}

fn embedding_provider(
    kind: EmbedProviderKind,
    settings: &Settings,
    dimension: Option<usize>,
) -> Result<Arc<dyn EmbeddingProvider>, CliError> {
    Ok(match kind {
        EmbedProviderKind::Fallback => {
            Arc::new(FallbackEmbedder::new(dimension.unwrap_or(settings.fallback_dimension))?)
        }
        EmbedProviderKind::Remote => {
            let cfg = settings.embedding.clone().ok_or_else(|| {
                CliError::Validation("remote embedding provider needs an [embedding] section in --settings".into())
            })?;
            Arc::new(RemoteEmbedder::new(cfg)?)
        }
    })
}

fn text_generator(
    kind: GeneratorKind,
    settings: &Settings,
    canned: Option<&Path>,
) -> Result<Arc<dyn TextGenerator>, CliError> {
    Ok(match kind {
        GeneratorKind::Stub => Arc::new(match canned {
            Some(p) => StubGenerator::from_file(p)?,
            None => StubGenerator::new(),
        }),
        GeneratorKind::Remote => {
            let cfg = settings.generation.clone().ok_or_else(|| {
                CliError::Validation("remote generation provider needs a [generation] section in --settings".into())
            })?;
            Arc::new(RemoteGenerator::new(cfg))
        }
    })
}

fn parse_config(name: &str) -> Result<IndexConfig, CliError> {
    Ok(name.parse::<IndexConfig>()?)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| CliError::Validation(e.to_string()))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Validation(e.to_string()))
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let settings = load_settings(cli.settings.as_deref())?;
    match cli.command {
        Command::Ingest { root, out: dest, json } => {
            let corpus = corpus::ingest_directory(&root)?;
            corpus::save_corpus(&corpus, &dest)?;
            if json {
                #[derive(Serialize)]
                struct Summary<'a> {
                    entries: usize,
                    version: u64,
                    ids: Vec<&'a str>,
                    out: String,
                }
                emit_json(
                    out,
                    &Summary {
                        entries: corpus.len(),
                        version: corpus.version(),
                        ids: corpus.entries().iter().map(|e| e.id.as_str()).collect(),
                        out: dest.display().to_string(),
                    },
                )
            } else {
                say(out, format_args!("ingested {} entries", corpus.len()))
            }
        }

        Command::Describe { corpus: path, out: dest, levels, force, provider, canned, cache, parallelism, json } => {
            let levels = corpus::parse_levels(&levels)?;
            if levels.is_empty() {
                return Err(CliError::Validation("--levels is empty".into()));
            }
            let corpus = corpus::load_corpus(&path)?;
            let generator = text_generator(provider, &settings, canned.as_deref())?;
            let cache_store = match &cache {
                Some(p) => Arc::new(GenerationCache::load(p)?),
                None => Arc::new(GenerationCache::new()),
            };
            let describer = Describer::new(generator)
                .with_cache(cache_store.clone())
                .with_parallelism(parallelism.unwrap_or(settings.generation_parallelism));
            let outcome = describer.generate_all(&corpus, &levels, force);
            let dest = dest.unwrap_or(path);
            if outcome.corpus.version() != corpus.version() || !dest.exists() {
                corpus::save_corpus(&outcome.corpus, &dest)?;
            }
            if let Some(p) = &cache {
                cache_store.save(p)?;
            }
            for f in &outcome.failures {
                let _ = writeln!(err, "failed: {} {}: {}", f.entry_id, f.level, f.error);
            }
            if json {
                #[derive(Serialize)]
                struct Failure<'a> {
                    entry_id: &'a str,
                    level: ExpertiseLevel,
                    error: String,
                }
                #[derive(Serialize)]
                struct Summary<'a> {
                    generated: usize,
                    version: u64,
                    failures: Vec<Failure<'a>>,
                }
                emit_json(
                    out,
                    &Summary {
                        generated: outcome.generated,
                        version: outcome.corpus.version(),
                        failures: outcome
                            .failures
                            .iter()
                            .map(|f| Failure { entry_id: &f.entry_id, level: f.level, error: f.error.to_string() })
                            .collect(),
                    },
                )?;
            } else {
                say(
                    out,
                    format_args!(
                        "generated {} descriptions ({} failed) for {} entries",
                        outcome.generated,
                        outcome.failures.len(),
                        outcome.corpus.len()
                    ),
                )?;
            }
            match outcome.failures.len() {
                0 => Ok(()),
                n if outcome.generated == 0 && outcome.failures.iter().all(|f| f.error.is_transport()) => {
                    Err(CliError::Provider(format!("all {n} generations failed: provider unavailable")))
                }
                n => Err(CliError::Partial(format!("{n} generation(s) failed"))),
            }
        }

        Command::Embed { corpus: path, config, out: dest, provider, dimension, json } => {
            let config = parse_config(&config)?;
            let corpus = corpus::load_corpus(&path)?;
            let provider = embedding_provider(provider, &settings, dimension)?;
            let embedder = Embedder::new(provider).with_max_input_chars(settings.max_input_chars);
            let outcome = embedder.embed_corpus(&corpus, &config);
            let index = RetrievalIndex::build(
                config.clone(),
                embedder.provider_id(),
                embedder.dimension(),
                outcome.vectors,
            )?;
            index.save(&dest)?;
            for (id, e) in &outcome.failures {
                let _ = writeln!(err, "failed: {id}: {e}");
            }
            if json {
                #[derive(Serialize)]
                struct Summary {
                    config: String,
                    provider: String,
                    dimension: usize,
                    embedded: usize,
                    failed: Vec<String>,
                }
                emit_json(
                    out,
                    &Summary {
                        config: config.name(),
                        provider: index.provider_id().to_string(),
                        dimension: index.dimension(),
                        embedded: index.len(),
                        failed: outcome.failures.iter().map(|(id, _)| id.clone()).collect(),
                    },
                )?;
            } else {
                say(out, format_args!("embedded {} entries with {} ({})", index.len(), config, index.provider_id()))?;
            }
            match outcome.failures.len() {
                0 => Ok(()),
                n if index.is_empty() && outcome.failures.iter().all(|(_, e)| e.is_transport()) => {
                    Err(CliError::Provider(format!("all {n} entries failed: provider unavailable")))
                }
                n => Err(CliError::Partial(format!("{n} entries failed to embed"))),
            }
        }

        Command::Query { text, index, corpus: corpus_path, provider, k, json } => {
            if k == 0 {
                return Err(CliError::Validation("-k must be at least 1".into()));
            }
            let provider = embedding_provider(provider, &settings, None)?;
            let (index, warning) = RetrievalIndex::load_for_provider(&index, provider.id())?;
            if let Some(w) = warning {
                let _ = writeln!(err, "warning: {w}");
            }
            let corpus = corpus_path.as_deref().map(corpus::load_corpus).transpose()?;
            let embedder = Embedder::new(provider).with_max_input_chars(settings.max_input_chars);
            let vector = embedder.embed(&text)?;
            let hits = index.query_top_k(&vector, k)?;
            let name = |id: &str| corpus.as_ref().and_then(|c| c.get(id)).map(|e| e.name.clone());
            if json {
                let results: Vec<service::QueryHit> = hits
                    .iter()
                    .map(|h| service::QueryHit {
                        entry_id: h.entry_id.clone(),
                        name: name(&h.entry_id).unwrap_or_else(|| h.entry_id.clone()),
                        score: h.score,
                        rank: h.rank,
                    })
                    .collect();
                emit_json(
                    out,
                    &service::QueryResponse {
                        config: index.config().name(),
                        provider: embedder.provider_id().to_string(),
                        results,
                    },
                )
            } else {
                for h in &hits {
                    say(out, format_args!("{}. {} ({:.4})", h.rank, h.entry_id, h.score))?;
                }
                Ok(())
            }
        }

        Command::Eval { corpus: path, provider, rows, configs, external, k, dimension, out: dest, json } => {
            if k == 0 {
                return Err(CliError::Validation("--k must be at least 1".into()));
            }
            let corpus = corpus::load_corpus(&path)?;
            let external = external.as_deref().map(QuerySet::load_external).transpose()?;
            let rows = select_rows(&corpus, rows.as_deref(), external)?;
            let configs = if configs.trim().eq_ignore_ascii_case("all") {
                IndexConfig::all()
            } else {
                configs.split(',').map(parse_config).collect::<Result<Vec<_>, _>>()?
            };
            let provider = embedding_provider(provider, &settings, dimension)?;
            let embedder = Embedder::new(provider).with_max_input_chars(settings.max_input_chars);
            let report = eval::run_table(&corpus, &rows, &configs, &embedder, k)?;
            if let Some(p) = &dest {
                std::fs::write(p, report.to_json()).map_err(|e| io_err(p, e))?;
            }
            if json {
                write!(out, "{}", report.to_json()).map_err(|e| CliError::Validation(e.to_string()))?;
            } else {
                write!(out, "{}", report.render_text()).map_err(|e| CliError::Validation(e.to_string()))?;
            }
            let partial = report.cells.iter().filter(|c| c.status == eval::CellStatus::Partial).count();
            if partial > 0 {
                return Err(CliError::Partial(format!("{partial} cell(s) had query failures")));
            }
            Ok(())
        }

        Command::Serve {
            corpus: corpus_path,
            index,
            config,
            provider,
            generator,
            canned,
            port,
            host,
            k_default,
            admin_token_env,
            static_dir,
            dimension,
        } => {
            init_tracing();
            let config = parse_config(&config)?;
            let corpus = corpus::load_corpus(&corpus_path)?;
            let provider = embedding_provider(provider, &settings, dimension)?;
            let embedder = Embedder::new(provider).with_max_input_chars(settings.max_input_chars);
            let built = match &index {
                Some(p) => {
                    let (idx, warning) = RetrievalIndex::load_for_provider(p, embedder.provider_id())?;
                    if let Some(w) = warning {
                        let _ = writeln!(err, "warning: {w}");
                    }
                    if idx.config() != &config {
                        return Err(CliError::Validation(format!(
                            "{} holds {} but --config is {config}",
                            p.display(),
                            idx.config()
                        )));
                    }
                    idx
                }
                None => eval::build_index(&corpus, &config, &embedder).map_err(|e| match e {
                    EvalError::Unavailable(m) => CliError::Provider(m),
                    other => other.into(),
                })?,
            };
            let describer = match generator {
                Some(kind) => Some(Arc::new(
                    Describer::new(text_generator(kind, &settings, canned.as_deref())?)
                        .with_parallelism(settings.generation_parallelism),
                )),
                None => None,
            };
            let admin_token = match admin_token_env {
                Some(var) => Some(std::env::var(&var).map_err(|_| {
                    CliError::Validation(format!("admin token variable {var} is not set"))
                })?),
                None => None,
            };
            let options = ServiceOptions {
                k_default: Some(k_default.max(1)),
                admin_token,
                corpus_path: Some(corpus_path),
                index_path: index,
                static_dir,
            };
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Validation(format!("bad address {host}:{port}: {e}")))?;
            let state = Arc::new(AppState::new(corpus, built, embedder, describer, options));
            serve(state, addr, out)
        }
    }
}

fn select_rows(corpus: &Corpus, rows: Option<&str>, external: Option<QuerySet>) -> Result<Vec<QuerySet>, CliError> {
    let names: Vec<String> = match rows {
        Some(r) => r.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => {
            let mut v: Vec<String> = ExpertiseLevel::ALL.iter().map(|l| l.code().to_string()).collect();
            if external.is_some() {
                v.push("External".into());
            }
            v
        }
    };
    let mut external = external;
    let mut sets = Vec::new();
    for name in names {
        if name.eq_ignore_ascii_case("external") {
            let set = external
                .take()
                .ok_or_else(|| CliError::Validation("row External needs --external <file>".into()))?;
            sets.push(set);
        } else {
            let level: ExpertiseLevel = name.parse()?;
            sets.push(QuerySet::from_level(corpus, level));
        }
    }
    if sets.is_empty() {
        return Err(CliError::Validation("no rows selected".into()));
    }
    Ok(sets)
}

fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info,tower_http=debug"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stdout).try_init();
}

fn serve(state: Arc<AppState>, addr: SocketAddr, out: &mut dyn Write) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Validation(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Validation(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Validation(e.to_string()))?;
        let _ = writeln!(out, "listening on http://{local}");
        let _ = out.flush();
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Validation(e.to_string()))
    })
}
