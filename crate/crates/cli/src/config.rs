use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use arr_core::dialogue::GenerationSettings;
use arr_core::gateway::{HttpBackendConfig, Profile};
use arr_core::reward::RewardConfig;
use serde::{Deserialize, Serialize};

/// Keys accepted next to the reward keys in a config file.
const BACKEND_KEYS: &[&str] = &[
    "llm_endpoint",
    "llm_model",
    "llm_timeout_secs",
    "llm_retries",
    "llm_api_key_env",
    "retrieval_endpoint",
    "corpus",
    "temperature",
    "max_tokens",
    "top_logprobs",
    "scripted_profile",
];

const REWARD_KEYS: &[&str] = &[
    "lambda",
    "n_buckets",
    "delta",
    "pattern_scores",
    "monitored_reasoner_kinds",
    "credited_verifier_kinds",
    "max_turns",
    "top_k",
    "group_size",
    "epsilon_clip",
    "beta_kl",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub llm_endpoint: String,
    pub llm_model: String,
    pub llm_timeout_secs: u64,
    pub llm_retries: u32,
    pub llm_api_key_env: Option<String>,
    /// Root URL of a search service; when unset the in-memory index is used.
    pub retrieval_endpoint: Option<String>,
    pub corpus: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: usize,
    pub scripted_profile: Profile,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpBackendConfig::default();
        Self {
            llm_endpoint: http.endpoint,
            llm_model: http.model,
            llm_timeout_secs: http.timeout_secs,
            llm_retries: http.retries,
            llm_api_key_env: Some("OPENAI_API_KEY".into()),
            retrieval_endpoint: None,
            corpus: None,
            temperature: 1.0,
            max_tokens: 512,
            top_logprobs: 5,
            scripted_profile: Profile::Noisy,
        }
    }
}

impl BackendConfig {
    pub fn http(&self) -> HttpBackendConfig {
        HttpBackendConfig {
            endpoint: self.llm_endpoint.clone(),
            model: self.llm_model.clone(),
            timeout_secs: self.llm_timeout_secs,
            retries: self.llm_retries,
            api_key_env: self.llm_api_key_env.clone(),
        }
    }

    pub fn generation(&self, strict: bool) -> GenerationSettings {
        GenerationSettings {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            top_logprobs_k: self.top_logprobs,
            stop_sequences: Vec::new(),
            retries: self.llm_retries,
            strict,
        }
    }
}

/// One flat TOML file holding reward and backend keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(flatten)]
    pub reward: RewardConfig,
    #[serde(flatten)]
    pub backend: BackendConfig,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = toml::from_str(text)?;
        if let Some(key) = table
            .keys()
            .find(|k| !REWARD_KEYS.contains(&k.as_str()) && !BACKEND_KEYS.contains(&k.as_str()))
        {
            bail!("unknown config key {key:?}");
        }
        let reward: RewardConfig = table.clone().try_into()?;
        let backend: BackendConfig = table.try_into()?;
        let cfg = Self { reward, backend };
        cfg.reward.validate()?;
        if cfg.backend.top_logprobs == 0 {
            bail!("top_logprobs must be >= 1");
        }
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }
}
