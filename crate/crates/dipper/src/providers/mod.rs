//! Uniform client layer over chat-completion, embedding, and reward-model
//! endpoints, with deterministic mock backends and a persistent
//! content-addressed response cache.
//!
//! A `base_url` of the form `mock://<path>` selects a table-driven backend
//! loaded from the JSON fixture at `<path>`; anything else is treated as an
//! OpenAI-compatible HTTP endpoint. Every facade retries transient
//! transport failures with exponential backoff, caches write-through, and
//! counts actual backend invocations (cache hits perform zero calls).

pub mod cache;
pub mod dispatch;
pub mod http;
pub mod mock;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{CoreError, EmbeddingMatrix, SamplingParams};
use cache::{CacheKey, EndpointKind, ResponseCache};
use dispatch::bounded_map;

const INITIAL_BACKOFF_MS: u64 = 50;
const EMBED_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport failure{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport {
        status: Option<u16>,
        message: String,
    },
    #[error("api key environment variable {env_var} is unset")]
    AuthMissing { env_var: String },
    #[error("embedding row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("reward endpoint returned a non-numeric score: {raw}")]
    NonNumericReward { raw: String },
    #[error("malformed provider response: {message}")]
    MalformedResponse { message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock fixture: {message}")]
    MockSpec { message: String },
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
    #[error(transparent)]
    Core(CoreError),
}

impl ProviderError {
    /// Connection failures and 429/5xx responses are transient; other
    /// statuses (auth, bad request, not found) will not improve on retry.
    fn is_retryable(&self) -> bool {
        match self {
            Self::Transport { status: None, .. } => true,
            Self::Transport {
                status: Some(s), ..
            } => *s == 429 || (500..=599).contains(s),
            _ => false,
        }
    }
}

/// Connection and dispatch settings for one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    /// Body key used for the repetition penalty; not part of the standard
    /// chat schema, so endpoints disagree on its name.
    #[serde(default = "default_rp_key")]
    pub repetition_penalty_key: String,
}

fn default_rp_key() -> String {
    "repetition_penalty".to_string()
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: String::new(),
            api_key_env: "DIPPER_API_KEY".to_string(),
            timeout_s: 60.0,
            max_retries: 2,
            max_concurrency: 8,
            repetition_penalty_key: default_rp_key(),
        }
    }

    pub fn mock_path(&self) -> Option<&str> {
        self.base_url.strip_prefix("mock://")
    }
}

/// One chat completion: the first choice's text plus a non-fatal flag set
/// when the provider reported a length stop.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatCompletion {
    pub text: String,
    pub truncated: bool,
}

pub trait ChatBackend: Send + Sync {
    fn chat(
        &self,
        model: &str,
        system: &str,
        user: &str,
        params: &SamplingParams,
    ) -> Result<ChatCompletion, ProviderError>;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

pub trait RewardBackend: Send + Sync {
    fn score(&self, model: &str, question: &str, response: &str) -> Result<f64, ProviderError>;
}

fn with_retries<T>(
    max_retries: u32,
    mut op: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let mut attempt = 0u32;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < max_retries => {
                std::thread::sleep(std::time::Duration::from_millis(
                    INITIAL_BACKOFF_MS << attempt.min(8),
                ));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn load_mock_spec<T: serde::de::DeserializeOwned>(path: &str) -> Result<T, ProviderError> {
    let bytes = std::fs::read(path).map_err(|e| ProviderError::MockSpec {
        message: format!("reading fixture {path}: {e}"),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ProviderError::MockSpec {
        message: format!("parsing fixture {path}: {e}"),
    })
}

#[derive(Serialize, Deserialize)]
struct ChatCacheEntry {
    kind: EndpointKind,
    model: String,
    system: String,
    user: String,
    params: SamplingParams,
    response: String,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
struct EmbedCacheEntry {
    kind: EndpointKind,
    model: String,
    text: String,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RewardCacheEntry {
    kind: EndpointKind,
    model: String,
    question: String,
    response: String,
    score: f64,
}

/// One queued chat request inside a batch.
#[derive(Debug, Clone)]
pub struct ChatJob {
    pub system: String,
    pub user: String,
    pub params: SamplingParams,
}

pub struct ChatProvider {
    cfg: ProviderConfig,
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    backend_calls: AtomicU64,
}

impl ChatProvider {
    pub fn from_config(
        cfg: &ProviderConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self, ProviderError> {
        let backend: Box<dyn ChatBackend> = match cfg.mock_path() {
            Some(path) => Box::new(mock::MockChatBackend::new(load_mock_spec(path)?)),
            None => Box::new(http::HttpBackend::new(cfg)?),
        };
        Ok(Self::with_backend(cfg.clone(), backend, cache_dir))
    }

    pub fn with_backend(
        cfg: ProviderConfig,
        backend: Box<dyn ChatBackend>,
        cache_dir: Option<&Path>,
    ) -> Self {
        Self {
            cfg,
            backend,
            cache: cache_dir.map(ResponseCache::new),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// Number of actual backend invocations (retries included, cache hits
    /// excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    /// One chat completion: cache lookup, then backend with retries, then
    /// write-through.
    pub fn complete(
        &self,
        system: &str,
        user: &str,
        params: &SamplingParams,
    ) -> Result<ChatCompletion, ProviderError> {
        if user.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "user message must be non-empty".into(),
            ));
        }
        let key = CacheKey::chat(&self.cfg.model, system, user, params);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.read::<ChatCacheEntry>(&key) {
                return Ok(ChatCompletion {
                    text: entry.response,
                    truncated: entry.truncated,
                });
            }
        }
        let completion = with_retries(self.cfg.max_retries, || {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.backend.chat(&self.cfg.model, system, user, params)
        })?;
        if let Some(cache) = &self.cache {
            cache.write(
                &key,
                &ChatCacheEntry {
                    kind: EndpointKind::Chat,
                    model: self.cfg.model.clone(),
                    system: system.to_string(),
                    user: user.to_string(),
                    params: params.clone(),
                    response: completion.text.clone(),
                    truncated: completion.truncated,
                },
            )?;
        }
        Ok(completion)
    }

    /// Dispatches a batch of completions with at most `max_concurrency`
    /// requests in flight. Results align with the job order.
    pub fn complete_batch(&self, jobs: &[ChatJob]) -> Vec<Result<ChatCompletion, ProviderError>> {
        bounded_map(jobs, self.cfg.max_concurrency, |job| {
            self.complete(&job.system, &job.user, &job.params)
        })
    }
}

pub struct EmbedProvider {
    cfg: ProviderConfig,
    backend: Box<dyn EmbedBackend>,
    cache: Option<ResponseCache>,
    backend_calls: AtomicU64,
}

impl EmbedProvider {
    pub fn from_config(
        cfg: &ProviderConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self, ProviderError> {
        let backend: Box<dyn EmbedBackend> = match cfg.mock_path() {
            Some(path) => Box::new(mock::MockEmbedBackend::new(load_mock_spec(path)?)),
            None => Box::new(http::HttpBackend::new(cfg)?),
        };
        Ok(Self::with_backend(cfg.clone(), backend, cache_dir))
    }

    pub fn with_backend(
        cfg: ProviderConfig,
        backend: Box<dyn EmbedBackend>,
        cache_dir: Option<&Path>,
    ) -> Self {
        Self {
            cfg,
            backend,
            cache: cache_dir.map(ResponseCache::new),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Embeds `texts` in input order, renormalizing every row to unit L2.
    /// Cached texts are not re-requested; misses go out in batches.
    pub fn embed(&self, texts: &[String]) -> Result<EmbeddingMatrix, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "embedding input must be non-empty".into(),
            ));
        }
        let keys: Vec<CacheKey> = texts
            .iter()
            .map(|t| CacheKey::embed(&self.cfg.model, t))
            .collect();
        let mut vectors: Vec<Option<Vec<f64>>> = keys
            .iter()
            .map(|k| {
                self.cache
                    .as_ref()
                    .and_then(|c| c.read::<EmbedCacheEntry>(k))
                    .map(|e| e.vector)
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| vectors[i].is_none()).collect();
        for chunk in missing.chunks(EMBED_BATCH) {
            let chunk_texts: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
            let fetched = with_retries(self.cfg.max_retries, || {
                self.backend_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.embed(&self.cfg.model, &chunk_texts)
            })?;
            if fetched.len() != chunk.len() {
                return Err(ProviderError::MalformedResponse {
                    message: format!(
                        "requested {} embeddings, got {}",
                        chunk.len(),
                        fetched.len()
                    ),
                });
            }
            for (&i, vector) in chunk.iter().zip(fetched) {
                if let Some(cache) = &self.cache {
                    cache.write(
                        &keys[i],
                        &EmbedCacheEntry {
                            kind: EndpointKind::Embed,
                            model: self.cfg.model.clone(),
                            text: texts[i].clone(),
                            vector: vector.clone(),
                        },
                    )?;
                }
                vectors[i] = Some(vector);
            }
        }
        let raw: Vec<Vec<f64>> = vectors.into_iter().map(|v| v.unwrap()).collect();
        EmbeddingMatrix::new(raw, &self.cfg.model).map_err(|e| match e {
            CoreError::RaggedEmbedding { row, expected, got } => {
                ProviderError::DimensionMismatch { row, expected, got }
            }
            other => ProviderError::Core(other),
        })
    }
}

pub struct RewardProvider {
    cfg: ProviderConfig,
    backend: Box<dyn RewardBackend>,
    cache: Option<ResponseCache>,
    backend_calls: AtomicU64,
}

impl RewardProvider {
    pub fn from_config(
        cfg: &ProviderConfig,
        cache_dir: Option<&Path>,
    ) -> Result<Self, ProviderError> {
        let backend: Box<dyn RewardBackend> = match cfg.mock_path() {
            Some(path) => Box::new(mock::MockRewardBackend::new(load_mock_spec(path)?)),
            None => Box::new(http::HttpBackend::new(cfg)?),
        };
        Ok(Self::with_backend(cfg.clone(), backend, cache_dir))
    }

    pub fn with_backend(
        cfg: ProviderConfig,
        backend: Box<dyn RewardBackend>,
        cache_dir: Option<&Path>,
    ) -> Self {
        Self {
            cfg,
            backend,
            cache: cache_dir.map(ResponseCache::new),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Scores one response; larger is better per the reward model's
    /// convention.
    pub fn score(&self, question: &str, response: &str) -> Result<f64, ProviderError> {
        if response.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "response to score must be non-empty".into(),
            ));
        }
        let key = CacheKey::reward(&self.cfg.model, question, response);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.read::<RewardCacheEntry>(&key) {
                return Ok(entry.score);
            }
        }
        let score = with_retries(self.cfg.max_retries, || {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.backend.score(&self.cfg.model, question, response)
        })?;
        if !score.is_finite() {
            return Err(ProviderError::NonNumericReward {
                raw: score.to_string(),
            });
        }
        if let Some(cache) = &self.cache {
            cache.write(
                &key,
                &RewardCacheEntry {
                    kind: EndpointKind::Reward,
                    model: self.cfg.model.clone(),
                    question: question.to_string(),
                    response: response.to_string(),
                    score,
                },
            )?;
        }
        Ok(score)
    }

    pub fn score_batch(&self, pairs: &[(String, String)]) -> Vec<Result<f64, ProviderError>> {
        bounded_map(pairs, self.cfg.max_concurrency, |(question, response)| {
            self.score(question, response)
        })
    }
}
