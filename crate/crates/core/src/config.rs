//! Run configuration. A TOML file and command-line flags share one flat
//! set of keys; flags win over the file, the file over built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::ExtractionMethod;
use crate::llm::{GenerationSettings, DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS, DEFAULT_MODEL, DEFAULT_TEMPERATURE};
use crate::qa::AnswerMode;
use crate::rerank::{RerankMode, DEFAULT_RETRIEVE_K};
use crate::sampler::SamplerConfig;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_EMBED_MODEL: &str = "text-embedding-3-small";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("{0}")]
    Invalid(String),
}

/// Where model responses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    /// Calls the HTTP endpoint every time.
    #[default]
    Live,
    /// Serves only from the cache store; a miss is an error.
    Replay,
    /// Serves from the cache store, calling and recording on a miss.
    Record,
    /// Scripted responses from a rules file.
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Local hashed bag-of-tokens vectors.
    #[default]
    Hashed,
    /// An OpenAI-compatible `/embeddings` endpoint.
    Http,
}

/// Every setting, each optional. Used for both the file and the flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub provider: Option<ProviderMode>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub concurrency: Option<usize>,
    pub embedder: Option<EmbedderKind>,
    pub embed_model: Option<String>,
    pub method: Option<ExtractionMethod>,
    pub hop_bound: Option<usize>,
    pub relevance_threshold: Option<f64>,
    pub max_triples_per_subgraph: Option<usize>,
    pub retrieve_k: Option<usize>,
    pub rerank_mode: Option<RerankMode>,
    pub answer_mode: Option<AnswerMode>,
    pub entities_from_options: Option<bool>,
    pub min_link_similarity: Option<f64>,
    pub cache: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),* $(,)?) => {
        PartialConfig { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl PartialConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(origin.to_path_buf(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text, path)
    }

    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: PartialConfig) -> PartialConfig {
        overlay!(
            self,
            lower,
            provider,
            base_url,
            model,
            temperature,
            max_tokens,
            concurrency,
            embedder,
            embed_model,
            method,
            hop_bound,
            relevance_threshold,
            max_triples_per_subgraph,
            retrieve_k,
            rerank_mode,
            answer_mode,
            entities_from_options,
            min_link_similarity,
            cache,
            mock,
            templates,
        )
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub provider: ProviderMode,
    pub base_url: String,
    pub generation: GenerationSettings,
    pub concurrency: usize,
    pub embedder: EmbedderKind,
    pub embed_model: String,
    pub method: ExtractionMethod,
    pub sampler: SamplerConfig,
    pub retrieve_k: usize,
    pub rerank_mode: RerankMode,
    pub answer_mode: AnswerMode,
    pub entities_from_options: bool,
    pub min_link_similarity: Option<f64>,
    pub cache: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(PartialConfig::default()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Fills unset fields with defaults and checks ranges.
    pub fn resolve(p: PartialConfig) -> Result<Self, ConfigError> {
        let d = SamplerConfig::default();
        let generation = GenerationSettings {
            model: p.model.unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            temperature: p.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            max_tokens: p.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS),
            system_prompt: None,
        };
        let c = RunConfig {
            provider: p.provider.unwrap_or_default(),
            base_url: p.base_url.unwrap_or_else(|| DEFAULT_BASE_URL.to_string()),
            generation,
            concurrency: p.concurrency.unwrap_or(DEFAULT_CONCURRENCY),
            embedder: p.embedder.unwrap_or_default(),
            embed_model: p.embed_model.unwrap_or_else(|| DEFAULT_EMBED_MODEL.to_string()),
            method: p.method.unwrap_or(ExtractionMethod::Generative),
            sampler: SamplerConfig {
                hop_bound: p.hop_bound.unwrap_or(d.hop_bound),
                relevance_threshold: p.relevance_threshold.unwrap_or(d.relevance_threshold),
                max_triples_per_subgraph: p.max_triples_per_subgraph.unwrap_or(d.max_triples_per_subgraph),
            },
            retrieve_k: p.retrieve_k.unwrap_or(DEFAULT_RETRIEVE_K),
            rerank_mode: p.rerank_mode.unwrap_or_default(),
            answer_mode: p.answer_mode.unwrap_or_default(),
            entities_from_options: p.entities_from_options.unwrap_or(true),
            min_link_similarity: p.min_link_similarity,
            cache: p.cache,
            mock: p.mock,
            templates: p.templates,
        };
        c.validate()?;
        Ok(c)
    }

    /// Flags over file over defaults.
    pub fn layered(flags: PartialConfig, file: Option<&Path>) -> Result<Self, ConfigError> {
        let file = match file {
            Some(path) => PartialConfig::load(path)?,
            None => PartialConfig::default(),
        };
        Self::resolve(flags.over(file))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.sampler.hop_bound == 0 {
            return bad("hop_bound must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.sampler.relevance_threshold) {
            return bad("relevance_threshold must lie in [0, 1]");
        }
        if self.sampler.max_triples_per_subgraph == 0 {
            return bad("max_triples_per_subgraph must be at least 1");
        }
        if self.retrieve_k == 0 {
            return bad("retrieve_k must be at least 1");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.min_link_similarity.is_some_and(|m| !(-1.0..=1.0).contains(&m)) {
            return bad("min_link_similarity must lie in [-1, 1]");
        }
        if self.provider == ProviderMode::Mock && self.mock.is_none() {
            return bad("provider \"mock\" needs a mock rules file");
        }
        if matches!(self.provider, ProviderMode::Replay | ProviderMode::Record) && self.cache.is_none() {
            return bad("replay and record providers need a cache path");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> PartialConfig {
        PartialConfig::from_toml(text, Path::new("test.toml")).unwrap()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.sampler, SamplerConfig::default());
        assert_eq!(c.retrieve_k, 5);
        assert_eq!(c.generation.temperature, 0.7);
        assert_eq!(c.concurrency, 4);
        assert_eq!(c.provider, ProviderMode::Live);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(PartialConfig::from_toml("hop_bond = 3", Path::new("x")).is_err());
    }

    /// (key, TOML value, flag overlay, field reader, default rendering).
    type Case = (
        &'static str,
        &'static str,
        PartialConfig,
        fn(&RunConfig) -> String,
        &'static str,
    );

    /// For every field: flag beats file beats default.
    #[test]
    fn precedence_per_field() {
        let cases: Vec<Case> = vec![
            (
                "provider",
                "\"replay\"",
                PartialConfig {
                    provider: Some(ProviderMode::Record),
                    ..Default::default()
                },
                |c| format!("{:?}", c.provider),
                "Live",
            ),
            (
                "base_url",
                "\"http://file\"",
                PartialConfig {
                    base_url: Some("http://flag".into()),
                    ..Default::default()
                },
                |c| c.base_url.clone(),
                DEFAULT_BASE_URL,
            ),
            (
                "model",
                "\"file-model\"",
                PartialConfig {
                    model: Some("flag-model".into()),
                    ..Default::default()
                },
                |c| c.generation.model.clone(),
                DEFAULT_MODEL,
            ),
            (
                "temperature",
                "0.1",
                PartialConfig {
                    temperature: Some(0.2),
                    ..Default::default()
                },
                |c| c.generation.temperature.to_string(),
                "0.7",
            ),
            (
                "max_tokens",
                "10",
                PartialConfig {
                    max_tokens: Some(20),
                    ..Default::default()
                },
                |c| c.generation.max_tokens.to_string(),
                "1024",
            ),
            (
                "concurrency",
                "2",
                PartialConfig {
                    concurrency: Some(3),
                    ..Default::default()
                },
                |c| c.concurrency.to_string(),
                "4",
            ),
            (
                "embedder",
                "\"http\"",
                PartialConfig {
                    embedder: Some(EmbedderKind::Hashed),
                    ..Default::default()
                },
                |c| format!("{:?}", c.embedder),
                "Hashed",
            ),
            (
                "embed_model",
                "\"fe\"",
                PartialConfig {
                    embed_model: Some("ge".into()),
                    ..Default::default()
                },
                |c| c.embed_model.clone(),
                DEFAULT_EMBED_MODEL,
            ),
            (
                "method",
                "\"pairwise\"",
                PartialConfig {
                    method: Some(ExtractionMethod::Generative),
                    ..Default::default()
                },
                |c| c.method.to_string(),
                "generative",
            ),
            (
                "hop_bound",
                "3",
                PartialConfig {
                    hop_bound: Some(4),
                    ..Default::default()
                },
                |c| c.sampler.hop_bound.to_string(),
                "2",
            ),
            (
                "relevance_threshold",
                "0.25",
                PartialConfig {
                    relevance_threshold: Some(0.75),
                    ..Default::default()
                },
                |c| c.sampler.relevance_threshold.to_string(),
                "0.5",
            ),
            (
                "max_triples_per_subgraph",
                "7",
                PartialConfig {
                    max_triples_per_subgraph: Some(8),
                    ..Default::default()
                },
                |c| c.sampler.max_triples_per_subgraph.to_string(),
                "40",
            ),
            (
                "retrieve_k",
                "3",
                PartialConfig {
                    retrieve_k: Some(10),
                    ..Default::default()
                },
                |c| c.retrieve_k.to_string(),
                "5",
            ),
            (
                "rerank_mode",
                "\"joint\"",
                PartialConfig {
                    rerank_mode: Some(RerankMode::Separate),
                    ..Default::default()
                },
                |c| format!("{:?}", c.rerank_mode),
                "Separate",
            ),
            (
                "answer_mode",
                "\"baseline\"",
                PartialConfig {
                    answer_mode: Some(AnswerMode::NoSelfRetrieval),
                    ..Default::default()
                },
                |c| format!("{:?}", c.answer_mode),
                "Dalk",
            ),
            (
                "entities_from_options",
                "false",
                PartialConfig {
                    entities_from_options: Some(true),
                    ..Default::default()
                },
                |c| c.entities_from_options.to_string(),
                "true",
            ),
            (
                "min_link_similarity",
                "0.3",
                PartialConfig {
                    min_link_similarity: Some(0.6),
                    ..Default::default()
                },
                |c| format!("{:?}", c.min_link_similarity),
                "None",
            ),
            (
                "cache",
                "\"file.jsonl\"",
                PartialConfig {
                    cache: Some("flag.jsonl".into()),
                    ..Default::default()
                },
                |c| format!("{:?}", c.cache),
                "None",
            ),
            (
                "mock",
                "\"file.json\"",
                PartialConfig {
                    mock: Some("flag.json".into()),
                    ..Default::default()
                },
                |c| format!("{:?}", c.mock),
                "None",
            ),
            (
                "templates",
                "\"fdir\"",
                PartialConfig {
                    templates: Some("gdir".into()),
                    ..Default::default()
                },
                |c| format!("{:?}", c.templates),
                "None",
            ),
        ];
        // Satisfies provider/cache/mock pairing rules in every layering.
        let support = PartialConfig {
            cache: Some("support.jsonl".into()),
            mock: Some("support.json".into()),
            ..Default::default()
        };
        for (key, file_value, flag, get, default) in cases {
            let f = file(&format!("{key} = {file_value}"));
            let base = |p: PartialConfig| {
                let p = p.over(support.clone());
                // Only the field under test may differ from the support layer.
                RunConfig::resolve(p).unwrap()
            };
            let from_file = get(&base(f.clone()));
            let from_flag = get(&base(flag.clone().over(f.clone())));
            let expected_flag = get(&base(flag.clone()));
            assert_eq!(from_flag, expected_flag, "{key}: flag must win over file");
            assert_ne!(from_flag, from_file, "{key}: flag and file values must differ");
            if !matches!(key, "cache" | "mock") {
                assert_eq!(get(&base(PartialConfig::default())), default, "{key}: default");
                assert_ne!(from_file, default, "{key}: file must override default");
            }
        }
    }

    #[test]
    fn range_checks() {
        for bad in [
            "hop_bound = 0",
            "relevance_threshold = 1.5",
            "retrieve_k = 0",
            "concurrency = 0",
            "max_triples_per_subgraph = 0",
            "provider = \"mock\"",
            "provider = \"replay\"",
        ] {
            assert!(RunConfig::resolve(file(bad)).is_err(), "{bad}");
        }
    }

    #[test]
    fn layered_reads_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "retrieve_k = 3\nhop_bound = 3\n").unwrap();
        let flags = PartialConfig {
            retrieve_k: Some(10),
            ..Default::default()
        };
        let c = RunConfig::layered(flags, Some(&path)).unwrap();
        assert_eq!((c.retrieve_k, c.sampler.hop_bound), (10, 3));
        assert!(matches!(
            RunConfig::layered(PartialConfig::default(), Some(&dir.path().join("nope.toml"))),
            Err(ConfigError::Io(..))
        ));
    }
}
