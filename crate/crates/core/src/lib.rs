//! Natural-language retrieval of constraint-programming models.
//!
//! A corpus of MiniZinc models is optionally enriched with generated
//! descriptions at three expertise levels, embedded into a vector space, and
//! searched by cosine similarity against the embedding of a user's problem
//! description. The `eval` module measures retrieval quality with a
//! leave-one-out protocol and truncated mean reciprocal rank.

pub mod cli;
pub mod corpus;
pub mod describe;
pub mod embedding;
pub mod eval;
pub mod index;
pub mod service;
pub mod settings;
mod util;

pub use corpus::{Corpus, CorpusError, ExpertiseLevel, ModelEntry, SourceFile};
pub use describe::{Describer, PromptTemplate, StubGenerator, TextGenerator};
pub use embedding::{Embedder, EmbeddingProvider, EmbeddingVector, FallbackEmbedder, IndexConfig};
pub use eval::{EvaluationReport, QuerySet};
pub use index::{cosine_similarity, RankedResult, RetrievalIndex};
pub use util::RetryPolicy;
