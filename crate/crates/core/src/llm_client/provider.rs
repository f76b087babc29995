//! Completion providers: a scripted test double and an HTTP client for
//! chat-completions compatible endpoints.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cache::cache_key;
use crate::prompting::ChatRequest;

pub const DEFAULT_API_KEY_ENV: &str = "CODA_API_KEY";
pub const BASE_URL_ENV: &str = "CODA_BASE_URL";

/// Which corpus cell a request belongs to. Providers may ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CellRef {
    pub passage_id: String,
    /// `None` for full-codebook requests.
    pub code_id: Option<String>,
}

impl CellRef {
    pub fn new(passage_id: impl Into<String>, code_id: Option<&str>) -> Self {
        CellRef {
            passage_id: passage_id.into(),
            code_id: code_id.map(String::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub model: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("request rejected with status {status}: {message}")]
    BadRequest { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("no scripted response for {0}")]
    ScriptedMiss(String),
}

impl ProviderError {
    /// Rate limits, 5xx responses and transport failures.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited(_) | ProviderError::Server { .. } | ProviderError::Transport(_)
        )
    }
}

#[async_trait]
pub trait Provider: Send + Sync {
    async fn send(&self, req: &ChatRequest, cell: Option<&CellRef>) -> Result<ProviderReply, ProviderError>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_id: Option<String>,
    pub response: String,
}

/// Script file for the mock provider: `{"entries": [...]}`. An entry matches
/// either an exact request (`cache_key`) or a cell (`passage_id` plus
/// `code_id`, with `code_id` omitted for full-codebook requests).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn by_cell(passage_id: &str, code_id: Option<&str>, response: impl Into<String>) -> ScriptEntry {
        ScriptEntry {
            cache_key: None,
            passage_id: Some(passage_id.into()),
            code_id: code_id.map(String::from),
            response: response.into(),
        }
    }

    pub fn by_key(key: impl Into<String>, response: impl Into<String>) -> ScriptEntry {
        ScriptEntry {
            cache_key: Some(key.into()),
            passage_id: None,
            code_id: None,
            response: response.into(),
        }
    }
}

/// Deterministic provider that answers from a [`Script`]. Exact-request
/// entries take precedence over cell entries; anything else is a scripted
/// miss.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    by_key: HashMap<String, String>,
    by_cell: HashMap<(String, Option<String>), String>,
    invocations: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(script: &Script) -> Self {
        let mut provider = ScriptedProvider::default();
        for entry in &script.entries {
            if let Some(key) = &entry.cache_key {
                provider.by_key.insert(key.clone(), entry.response.clone());
            } else if let Some(passage) = &entry.passage_id {
                provider
                    .by_cell
                    .insert((passage.clone(), entry.code_id.clone()), entry.response.clone());
            }
        }
        provider
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }
}

/// Builds a scripted provider handle.
pub fn scripted_provider(script: &Script) -> ScriptedProvider {
    ScriptedProvider::new(script)
}

#[async_trait]
impl Provider for ScriptedProvider {
    async fn send(&self, req: &ChatRequest, cell: Option<&CellRef>) -> Result<ProviderReply, ProviderError> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        let key = cache_key(req);
        let text = self
            .by_key
            .get(&key)
            .or_else(|| cell.and_then(|c| self.by_cell.get(&(c.passage_id.clone(), c.code_id.clone()))));
        match text {
            Some(t) => Ok(ProviderReply {
                text: t.clone(),
                model: req.model.clone(),
            }),
            None => Err(ProviderError::ScriptedMiss(match cell {
                Some(CellRef {
                    passage_id,
                    code_id: Some(code),
                }) => format!("request {key} (passage {passage_id}, code {code})"),
                Some(CellRef { passage_id, .. }) => format!("request {key} (passage {passage_id})"),
                None => format!("request {key}"),
            })),
        }
    }
}

/// Settings for the network provider and the client built around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub max_retries: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            base_url: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_in_flight: 4,
            max_retries: 3,
        }
    }
}

impl ProviderConfig {
    /// Base URL from the config, falling back to `CODA_BASE_URL`.
    pub fn resolved_base_url(&self) -> Option<String> {
        if !self.base_url.trim().is_empty() {
            return Some(self.base_url.trim().to_string());
        }
        std::env::var(BASE_URL_ENV).ok().filter(|s| !s.trim().is_empty())
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [crate::prompting::ChatMessage],
    temperature: f64,
    top_p: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Client for `POST {base_url}/chat/completions` with bearer auth.
#[derive(Debug)]
pub struct OpenAiCompatProvider {
    http: reqwest::Client,
    endpoint: String,
    api_key: String,
}

impl OpenAiCompatProvider {
    /// Reads the API key from the configured environment variable. A missing
    /// key is an authentication error, raised before any network activity.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| ProviderError::Auth(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let base = cfg.resolved_base_url().ok_or_else(|| ProviderError::BadRequest {
            status: 0,
            message: format!("no base URL configured (set {BASE_URL_ENV})"),
        })?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(180))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(OpenAiCompatProvider {
            http,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key,
        })
    }
}

fn classify_status(status: u16, body: String) -> ProviderError {
    match status {
        401 | 403 => ProviderError::Auth(body),
        429 => ProviderError::RateLimited(body),
        408 => ProviderError::Transport(format!("request timeout: {body}")),
        500..=599 => ProviderError::Server { status, message: body },
        _ => ProviderError::BadRequest { status, message: body },
    }
}

#[async_trait]
impl Provider for OpenAiCompatProvider {
    async fn send(&self, req: &ChatRequest, _cell: Option<&CellRef>) -> Result<ProviderReply, ProviderError> {
        let body = WireRequest {
            model: &req.model,
            messages: &req.messages,
            temperature: req.temperature,
            top_p: req.top_p,
        };
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().await.map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, text));
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Malformed("response has no choices".into()))?;
        Ok(ProviderReply {
            text: choice.message.content.unwrap_or_default(),
            model: parsed.model.unwrap_or_else(|| req.model.clone()),
        })
    }
}
