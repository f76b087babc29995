//! Chat-completion transport.
//!
//! [`LlmClient`] wraps a [`Provider`] with a content-addressed response
//! cache, retries with full-jitter exponential backoff, and a counting gate
//! that bounds simultaneous provider calls.

mod cache;
mod provider;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::prompting::ChatRequest;

pub use cache::{cache_key, CachedResponse, ResponseCache};
pub use provider::{
    scripted_provider, CellRef, OpenAiCompatProvider, Provider, ProviderConfig, ProviderError, ProviderReply, Script,
    ScriptEntry, ScriptedProvider, BASE_URL_ENV, DEFAULT_API_KEY_ENV,
};

pub const CACHE_DIR_ENV: &str = "CODA_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".coda-cache";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub model: String,
    pub cached: bool,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: ProviderError },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("no scripted response for {0}")]
    ScriptedMiss(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl ClientError {
    /// Errors that will recur on every request, so a run should stop issuing
    /// new ones.
    pub fn is_fatal(&self) -> bool {
        matches!(self, ClientError::Authentication(_) | ClientError::Cache(_))
    }
}

impl From<ProviderError> for ClientError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Auth(m) => ClientError::Authentication(m),
            ProviderError::Malformed(m) => ClientError::MalformedResponse(m),
            ProviderError::ScriptedMiss(m) => ClientError::ScriptedMiss(m),
            other @ (ProviderError::BadRequest { .. }
            | ProviderError::RateLimited(_)
            | ProviderError::Server { .. }
            | ProviderError::Transport(_)) => ClientError::Rejected(other.to_string()),
        }
    }
}

/// Exponential backoff with full jitter: before retry `k` (1-based) the
/// client sleeps a uniform random time in `[0, min(max_delay, base * 2^(k-1))]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `retry` (1-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let cap = self.ceiling(retry).as_micros() as u64;
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_micros(rand::rng().random_range(0..=cap))
    }
}

pub struct LlmClient {
    provider: Arc<dyn Provider>,
    cache: Option<ResponseCache>,
    gate: Semaphore,
    max_in_flight: usize,
    retry: RetryPolicy,
    key_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    provider_calls: AtomicUsize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("cache", &self.cache)
            .field("max_in_flight", &self.max_in_flight)
            .field("retry", &self.retry)
            .finish()
    }
}

impl LlmClient {
    /// A client with no cache, 4 calls in flight and the default retry policy.
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        LlmClient {
            provider,
            cache: None,
            gate: Semaphore::new(4),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            key_locks: Mutex::default(),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        let n = n.max(1);
        self.gate = Semaphore::new(n);
        self.max_in_flight = n;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Applies `max_in_flight` and `max_retries` from a provider config.
    pub fn configured(self, cfg: &ProviderConfig) -> Self {
        let retry = RetryPolicy {
            max_retries: cfg.max_retries,
            ..self.retry
        };
        self.with_max_in_flight(cfg.max_in_flight).with_retry(retry)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Number of provider invocations made so far, retries included.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    fn key_lock(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.key_locks
            .lock()
            .expect("key lock table")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    /// Completes one request, answering from the cache when possible.
    ///
    /// Identical concurrent requests are serialized on their cache key, so
    /// the provider sees each distinct request at most once while caching is
    /// enabled.
    pub async fn complete(&self, req: &ChatRequest, cell: Option<&CellRef>) -> Result<Completion, ClientError> {
        let started = Instant::now();
        let Some(cache) = &self.cache else {
            let (reply, attempts) = self.call_with_retry(req, cell).await?;
            return Ok(Completion {
                text: reply.text,
                model: reply.model,
                cached: false,
                latency_ms: started.elapsed().as_millis() as u64,
                attempt_count: attempts,
            });
        };

        let key = cache_key(req);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().await;
        if let Some(hit) = cache.get(&key)? {
            return Ok(Completion {
                text: hit.text,
                model: hit.model,
                cached: true,
                latency_ms: started.elapsed().as_millis() as u64,
                attempt_count: 1,
            });
        }
        let (reply, attempts) = self.call_with_retry(req, cell).await?;
        cache.put(
            &key,
            req,
            CachedResponse {
                text: reply.text.clone(),
                model: reply.model.clone(),
            },
        )?;
        Ok(Completion {
            text: reply.text,
            model: reply.model,
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: attempts,
        })
    }

    async fn call_with_retry(
        &self,
        req: &ChatRequest,
        cell: Option<&CellRef>,
    ) -> Result<(ProviderReply, u32), ClientError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.gate.acquire().await.expect("gate is never closed");
                self.provider_calls.fetch_add(1, Ordering::SeqCst);
                self.provider.send(req, cell).await
            };
            match result {
                Ok(reply) => return Ok((reply, attempt)),
                Err(e) if e.is_retryable() && attempt <= self.retry.max_retries => {
                    let delay = self.retry.jittered(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "transient provider failure, retrying");
                    tokio::time::sleep(delay).await;
                }
                Err(e) if e.is_retryable() => {
                    return Err(ClientError::RetriesExhausted {
                        attempts: attempt,
                        last: e,
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_ceiling_doubles_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.ceiling(1), Duration::from_secs(1));
        assert_eq!(p.ceiling(2), Duration::from_secs(2));
        assert_eq!(p.ceiling(3), Duration::from_secs(4));
        assert_eq!(p.ceiling(40), Duration::from_secs(60));
        for retry in 1..6 {
            assert!(p.jittered(retry) <= p.ceiling(retry));
        }
    }

    #[test]
    fn fatal_errors() {
        assert!(ClientError::Authentication(String::new()).is_fatal());
        assert!(!ClientError::ScriptedMiss(String::new()).is_fatal());
    }
}
