//! Optional TOML settings file naming providers, endpoints, dimensions and
//! credential environment variables.
//!
//! ```toml
//! [embedding]
//! endpoint = "http://localhost:8080/v1/embeddings"
//! model = "gte-modernbert-base"
//! dimension = 768
//! api_key_env = "EMBEDDING_API_KEY"
//!
//! [generation]
//! endpoint = "https://api.example.com/v1/chat/completions"
//! model = "llama3-70b-8192"
//! api_key_env = "LLM_API_KEY"
//! temperature = 0.0
//! ```

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::describe::RemoteGeneratorConfig;
use crate::embedding::{RemoteEmbedderConfig, DEFAULT_DIMENSION, DEFAULT_MAX_INPUT_CHARS};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Dimension of the local fallback embedder.
    #[serde(default = "default_dimension")]
    pub fallback_dimension: usize,
    #[serde(default = "default_max_chars")]
    pub max_input_chars: usize,
    #[serde(default = "default_parallelism")]
    pub generation_parallelism: usize,
    #[serde(default)]
    pub embedding: Option<RemoteEmbedderConfig>,
    #[serde(default)]
    pub generation: Option<RemoteGeneratorConfig>,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}
fn default_max_chars() -> usize {
    DEFAULT_MAX_INPUT_CHARS
}
fn default_parallelism() -> usize {
    4
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            fallback_dimension: DEFAULT_DIMENSION,
            max_input_chars: DEFAULT_MAX_INPUT_CHARS,
            generation_parallelism: 4,
            embedding: None,
            generation: None,
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_document() {
        let s: Settings = toml::from_str(
            r#"
            fallback_dimension = 256
            [embedding]
            endpoint = "http://localhost:9/v1/embeddings"
            model = "m"
            api_key_env = "KEY"
            [generation]
            endpoint = "http://localhost:9/v1/chat/completions"
            model = "llm"
            "#,
        )
        .unwrap();
        assert_eq!(s.fallback_dimension, 256);
        let e = s.embedding.unwrap();
        assert_eq!(e.dimension, 768);
        assert_eq!(e.batch_size, 16);
        assert_eq!(e.max_in_flight, 4);
        let g = s.generation.unwrap();
        assert_eq!(g.temperature, 0.0);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(toml::from_str::<Settings>("").unwrap(), Settings::default());
        assert!(toml::from_str::<Settings>("bogus = 1").is_err());
    }
}
