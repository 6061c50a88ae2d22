//! Deterministic mock backends, loadable from JSON fixture files via
//! `mock://<path>` base URLs. Used for offline tests and reproducible
//! end-to-end runs without a live endpoint.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatCompletion, EmbedBackend, ProviderError, RewardBackend};
use crate::core::SamplingParams;

/// Tracks concurrent calls for concurrency-bound assertions.
#[derive(Debug, Default)]
pub struct InflightGauge {
    current: AtomicUsize,
    max_seen: AtomicUsize,
}

impl InflightGauge {
    pub fn enter(&self) -> InflightGuard<'_> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
        InflightGuard { gauge: self }
    }

    pub fn max_seen(&self) -> usize {
        self.max_seen.load(Ordering::SeqCst)
    }
}

pub struct InflightGuard<'a> {
    gauge: &'a InflightGauge,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.gauge.current.fetch_sub(1, Ordering::SeqCst);
    }
}

/// One chat rule: all present conditions must hold for the rule to fire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockChatRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    /// Match only this draw index; lets fixtures vary across repeated samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_index: Option<u32>,
    pub response: String,
    #[serde(default)]
    pub truncated: bool,
}

impl MockChatRule {
    fn matches(&self, system: &str, user: &str, params: &SamplingParams) -> bool {
        if let Some(s) = &self.system {
            if s != system {
                return false;
            }
        }
        if let Some(s) = &self.system_contains {
            if !system.contains(s.as_str()) {
                return false;
            }
        }
        if let Some(u) = &self.user {
            if u != user {
                return false;
            }
        }
        if let Some(u) = &self.user_contains {
            if !user.contains(u.as_str()) {
                return false;
            }
        }
        if let Some(si) = self.seed_index {
            if si != params.seed_index {
                return false;
            }
        }
        true
    }
}

/// Table-driven chat fixture. First matching rule wins; `default` answers
/// anything unmatched.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockChatSpec {
    #[serde(default)]
    pub rules: Vec<MockChatRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Simulated per-call latency, to make concurrency observable.
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockChatSpec {
    pub fn respond(
        &self,
        system: &str,
        user: &str,
        params: &SamplingParams,
    ) -> Option<(String, bool)> {
        for rule in &self.rules {
            if rule.matches(system, user, params) {
                return Some((rule.response.clone(), rule.truncated));
            }
        }
        self.default.clone().map(|d| (d, false))
    }
}

pub struct MockChatBackend {
    spec: MockChatSpec,
    pub gauge: Arc<InflightGauge>,
}

impl MockChatBackend {
    pub fn new(spec: MockChatSpec) -> Self {
        Self {
            spec,
            gauge: Arc::new(InflightGauge::default()),
        }
    }

    pub fn with_gauge(spec: MockChatSpec, gauge: Arc<InflightGauge>) -> Self {
        Self { spec, gauge }
    }
}

impl ChatBackend for MockChatBackend {
    fn chat(
        &self,
        _model: &str,
        system: &str,
        user: &str,
        params: &SamplingParams,
    ) -> Result<ChatCompletion, ProviderError> {
        let _guard = self.gauge.enter();
        if self.spec.latency_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.spec.latency_ms));
        }
        match self.spec.respond(system, user, params) {
            Some((text, truncated)) => Ok(ChatCompletion { text, truncated }),
            None => Err(ProviderError::MockSpec {
                message: format!("no chat rule matched user message {user:?}"),
            }),
        }
    }
}

/// Table-driven embedding fixture. Unlisted texts fall back to a
/// deterministic hash-derived vector when `hash_fallback` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEmbedSpec {
    pub dim: usize,
    #[serde(default)]
    pub entries: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub hash_fallback: bool,
}

/// Deterministic pseudo-embedding: bytes of sha256(text) mapped into
/// [-1, 1], cycled out to `dim` entries.
pub fn hash_vector(text: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    (0..dim)
        .map(|i| {
            let byte = digest[i % digest.len()];
            let rotated = byte.wrapping_add(((i / digest.len()) as u8).wrapping_mul(37));
            (rotated as f64 / 127.5) - 1.0
        })
        .collect()
}

pub struct MockEmbedBackend {
    spec: MockEmbedSpec,
    pub gauge: Arc<InflightGauge>,
}

impl MockEmbedBackend {
    pub fn new(spec: MockEmbedSpec) -> Self {
        Self {
            spec,
            gauge: Arc::new(InflightGauge::default()),
        }
    }
}

impl EmbedBackend for MockEmbedBackend {
    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let _guard = self.gauge.enter();
        texts
            .iter()
            .map(|t| match self.spec.entries.get(t) {
                Some(v) => Ok(v.clone()),
                None if self.spec.hash_fallback => Ok(hash_vector(t, self.spec.dim)),
                None => Err(ProviderError::MockSpec {
                    message: format!("no embedding entry for text {t:?}"),
                }),
            })
            .collect()
    }
}

/// One reward rule, matched against the question/response pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRewardRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_contains: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockRewardSpec {
    #[serde(default)]
    pub rules: Vec<MockRewardRule>,
    /// Score unmatched responses by their character length.
    #[serde(default)]
    pub length_based: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<f64>,
}

pub struct MockRewardBackend {
    spec: MockRewardSpec,
}

impl MockRewardBackend {
    pub fn new(spec: MockRewardSpec) -> Self {
        Self { spec }
    }
}

impl RewardBackend for MockRewardBackend {
    fn score(&self, _model: &str, question: &str, response: &str) -> Result<f64, ProviderError> {
        for rule in &self.spec.rules {
            let q_ok = rule
                .question_contains
                .as_ref()
                .is_none_or(|q| question.contains(q.as_str()));
            let r_ok = rule
                .response_contains
                .as_ref()
                .is_none_or(|r| response.contains(r.as_str()));
            if q_ok && r_ok {
                return Ok(rule.score);
            }
        }
        if self.spec.length_based {
            return Ok(response.chars().count() as f64);
        }
        match self.spec.default {
            Some(s) => Ok(s),
            None => Err(ProviderError::MockSpec {
                message: format!("no reward rule matched response {response:?}"),
            }),
        }
    }
}
