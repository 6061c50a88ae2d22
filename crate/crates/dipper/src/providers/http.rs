//! HTTP backends speaking the OpenAI-compatible wire formats.
//!
//! Chat: `POST {base_url}/chat/completions` with `model`, `messages`,
//! `temperature`, `top_p`, `max_tokens`, plus the configured
//! repetition-penalty key; the reply is read at
//! `choices[0].message.content`. Embeddings: `POST {base_url}/embeddings`
//! with `{model, input}`; vectors read at `data[i].embedding`. Reward:
//! `POST {base_url}/score` with `{model, question, response}`; the score
//! read at `score`.

use serde_json::{json, Value};

use super::{
    ChatBackend, ChatCompletion, EmbedBackend, ProviderConfig, ProviderError, RewardBackend,
};
use crate::core::SamplingParams;

/// Request body for one chat completion, exactly the fields the wire
/// format pins down. `seed_index` is a cache discriminator and is never
/// sent to the provider.
pub fn chat_body(cfg: &ProviderConfig, system: &str, user: &str, params: &SamplingParams) -> Value {
    let mut messages = Vec::new();
    if !system.is_empty() {
        messages.push(json!({"role": "system", "content": system}));
    }
    messages.push(json!({"role": "user", "content": user}));
    let mut body = json!({
        "model": cfg.model,
        "messages": messages,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
    });
    // not part of the standard chat schema, so the key name is configurable
    body[cfg.repetition_penalty_key.as_str()] = json!(params.repetition_penalty);
    body
}

pub fn embeddings_body(cfg: &ProviderConfig, texts: &[String]) -> Value {
    json!({"model": cfg.model, "input": texts})
}

pub fn reward_body(cfg: &ProviderConfig, question: &str, response: &str) -> Value {
    json!({"model": cfg.model, "question": question, "response": response})
}

pub struct HttpBackend {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| ProviderError::Transport {
                status: None,
                message: format!("building http client: {e}"),
            })?;
        Ok(Self {
            cfg: cfg.clone(),
            client,
        })
    }

    /// Bearer token from the configured environment variable. An empty
    /// variable name means the endpoint needs no auth.
    fn api_key(&self) -> Result<Option<String>, ProviderError> {
        if self.cfg.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.cfg.api_key_env) {
            Ok(key) => Ok(Some(key)),
            Err(_) => Err(ProviderError::AuthMissing {
                env_var: self.cfg.api_key_env.clone(),
            }),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = format!("{}{}", self.cfg.base_url.trim_end_matches('/'), path);
        let mut req = self.client.post(&url).json(body);
        if let Some(key) = self.api_key()? {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport {
            status: None,
            message: format!("POST {url}: {e}"),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ProviderError::Transport {
                status: Some(status),
                message: format!("POST {url} returned status {status}"),
            });
        }
        resp.json().map_err(|e| ProviderError::MalformedResponse {
            message: format!("decoding response from {url}: {e}"),
        })
    }
}

impl ChatBackend for HttpBackend {
    fn chat(
        &self,
        _model: &str,
        system: &str,
        user: &str,
        params: &SamplingParams,
    ) -> Result<ChatCompletion, ProviderError> {
        let body = chat_body(&self.cfg, system, user, params);
        let value = self.post("/chat/completions", &body)?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::MalformedResponse {
                message: "missing choices[0].message.content".into(),
            })?
            .to_string();
        let truncated = value["choices"][0]["finish_reason"].as_str() == Some("length");
        Ok(ChatCompletion { text, truncated })
    }
}

impl EmbedBackend for HttpBackend {
    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let value = self.post("/embeddings", &embeddings_body(&self.cfg, texts))?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| ProviderError::MalformedResponse {
                message: "missing data array".into(),
            })?;
        if data.len() != texts.len() {
            return Err(ProviderError::MalformedResponse {
                message: format!("expected {} embeddings, got {}", texts.len(), data.len()),
            });
        }
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .ok_or_else(|| ProviderError::MalformedResponse {
                        message: "missing embedding vector".into(),
                    })?
                    .iter()
                    .map(|x| {
                        x.as_f64().ok_or_else(|| ProviderError::MalformedResponse {
                            message: "non-numeric embedding component".into(),
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

impl RewardBackend for HttpBackend {
    fn score(&self, _model: &str, question: &str, response: &str) -> Result<f64, ProviderError> {
        let value = self.post("/score", &reward_body(&self.cfg, question, response))?;
        match value["score"].as_f64() {
            Some(s) if s.is_finite() => Ok(s),
            _ => Err(ProviderError::NonNumericReward {
                raw: value["score"].to_string(),
            }),
        }
    }
}
