//! Declarative run configuration: one JSON document drives the whole
//! pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{seed_topics, EpaTopic, Strategy};
use crate::embedder::{BackendKind, BackendSpec};
use crate::genharness::{ProviderConfig, ProviderKind};
use crate::report::HIGH_SIMILARITY_THRESHOLD;
use crate::simengine::{BandTable, SimError};

/// Default flag threshold: the inclusive lower bound of the
/// flag-for-expert-review band.
pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.80;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

/// Everything one run needs. Field defaults reproduce the reference setup:
/// 10 questions per topic, temperature 1, max tokens 2000, the four shipped
/// topics, and both encoder backends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "seed_topics")]
    pub topics: Vec<EpaTopic>,
    #[serde(default = "default_providers")]
    pub providers: Vec<ProviderConfig>,
    /// Provider that runs the guided strategy; defaults to the first
    /// provider in `providers`.
    #[serde(default)]
    pub guided_provider: Option<String>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_questions_per_topic")]
    pub questions_per_topic: u32,
    #[serde(default = "default_backends")]
    pub backends: Vec<BackendSpec>,
    /// Optional override of the five finite band lower bounds, highest first.
    #[serde(default)]
    pub band_bounds: Option<[f64; 5]>,
    #[serde(default = "default_flag_threshold")]
    pub flag_threshold: f64,
    #[serde(default = "default_high_similarity_threshold")]
    pub high_similarity_threshold: f64,
    /// Plain-text exemplar items for guided prompts.
    #[serde(default)]
    pub samples_file: Option<PathBuf>,
    /// Plain-text item-writing guidelines for guided prompts.
    #[serde(default)]
    pub guidelines_file: Option<PathBuf>,
    /// Workspace directory; the CLI `--workspace` flag overrides it.
    #[serde(default)]
    pub workspace: Option<PathBuf>,
    /// Determinism seed for mock providers and test backends; also pins
    /// manifest/provenance timestamps. The CLI `--seed` flag overrides it.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_run_id() -> String {
    "run-001".to_string()
}

fn default_questions_per_topic() -> u32 {
    10
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Naive, Strategy::Guided]
}

fn default_flag_threshold() -> f64 {
    DEFAULT_FLAG_THRESHOLD
}

fn default_high_similarity_threshold() -> f64 {
    HIGH_SIMILARITY_THRESHOLD
}

fn default_providers() -> Vec<ProviderConfig> {
    vec![
        ProviderConfig::mock("gpt-4o", 0),
        ProviderConfig::mock("claude-sonnet-4", 0),
        ProviderConfig::mock("gemini-2.5-flash", 0),
    ]
}

fn default_backends() -> Vec<BackendSpec> {
    vec![
        BackendSpec::biobert(BackendKind::Test { seed: 0 }),
        BackendSpec::pubmedbert(BackendKind::Test { seed: 0 }),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.trim().is_empty() {
            return Err(ConfigError::Invalid("run_id is empty".into()));
        }
        if self.topics.is_empty() {
            return Err(ConfigError::Invalid("no topics configured".into()));
        }
        for topic in &self.topics {
            topic
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.providers.is_empty() {
            return Err(ConfigError::Invalid("no providers configured".into()));
        }
        for provider in &self.providers {
            if !(provider.temperature >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "provider {}: negative temperature",
                    provider.provider_id
                )));
            }
            if provider.max_tokens == 0 {
                return Err(ConfigError::Invalid(format!(
                    "provider {}: max_tokens must be positive",
                    provider.provider_id
                )));
            }
            if provider.kind != ProviderKind::Mock {
                if provider.endpoint.is_empty() {
                    return Err(ConfigError::Invalid(format!(
                        "provider {}: endpoint required",
                        provider.provider_id
                    )));
                }
                if provider.auth_env.is_none() {
                    return Err(ConfigError::Invalid(format!(
                        "provider {}: auth_env (credential variable name) required",
                        provider.provider_id
                    )));
                }
            }
        }
        if self.questions_per_topic == 0 {
            return Err(ConfigError::Invalid(
                "questions_per_topic must be at least 1".into(),
            ));
        }
        if self.backends.is_empty() {
            return Err(ConfigError::Invalid("no backends configured".into()));
        }
        for backend in &self.backends {
            backend
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(id) = &self.guided_provider {
            if !self.providers.iter().any(|p| &p.provider_id == id) {
                return Err(ConfigError::Invalid(format!(
                    "guided_provider {id} is not in providers"
                )));
            }
        }
        self.band_table()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// The provider config that runs the guided strategy.
    pub fn guided_provider_config(&self) -> &ProviderConfig {
        match &self.guided_provider {
            Some(id) => self
                .providers
                .iter()
                .find(|p| &p.provider_id == id)
                .expect("validated"),
            None => &self.providers[0],
        }
    }

    /// Band table with any configured bound overrides applied.
    pub fn band_table(&self) -> Result<BandTable, SimError> {
        match self.band_bounds {
            Some(bounds) => BandTable::with_bounds(bounds),
            None => Ok(BandTable::default()),
        }
    }

    /// Backends selected by `--backend` filters (empty filter = all).
    pub fn selected_backends(&self, filters: &[String]) -> Result<Vec<&BackendSpec>, ConfigError> {
        if filters.is_empty() {
            return Ok(self.backends.iter().collect());
        }
        let mut selected = Vec::new();
        for id in filters {
            let spec = self
                .backends
                .iter()
                .find(|b| &b.backend_id == id)
                .ok_or_else(|| {
                    ConfigError::Invalid(format!("backend {id} is not in the configuration"))
                })?;
            selected.push(spec);
        }
        Ok(selected)
    }
}
