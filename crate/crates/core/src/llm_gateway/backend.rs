use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::replay::{CacheEntry, ReplayCache};
use super::template::RenderedPrompt;
use super::GatewayError;
use crate::http::{self, HttpError, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Replay,
    Scripted,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Remote => "remote",
            BackendKind::Replay => "replay",
            BackendKind::Scripted => "scripted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub backend: BackendKind,
    pub usage: Option<Usage>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionParams {
    pub temperature: f32,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    /// Transport retries for rate limits, timeouts and server errors.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

impl CompletionParams {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.retries,
            backoff_base: Duration::from_millis(self.backoff_ms),
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, prompt: &RenderedPrompt, params: &CompletionParams) -> Result<Completion, GatewayError>;
}

type ScriptFn = dyn Fn(&RenderedPrompt) -> String + Send + Sync;

/// Answers from a caller-supplied pure function.
#[derive(Clone)]
pub struct ScriptedBackend {
    script: Arc<ScriptFn>,
}

impl ScriptedBackend {
    pub fn new(script: impl Fn(&RenderedPrompt) -> String + Send + Sync + 'static) -> Self {
        Self {
            script: Arc::new(script),
        }
    }
}

impl CompletionBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, prompt: &RenderedPrompt, _params: &CompletionParams) -> Result<Completion, GatewayError> {
        Ok(Completion {
            raw_text: (self.script)(prompt),
            backend: BackendKind::Scripted,
            usage: None,
            latency_ms: None,
        })
    }
}

/// Serves completions from a recorded cache; unseen prompts are an error.
pub struct ReplayBackend {
    cache: ReplayCache,
}

impl ReplayBackend {
    pub fn new(cache: ReplayCache) -> Self {
        Self { cache }
    }
}

impl CompletionBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, prompt: &RenderedPrompt, _params: &CompletionParams) -> Result<Completion, GatewayError> {
        let digest = prompt.digest();
        match self.cache.get(&digest) {
            Some(raw_text) => Ok(Completion {
                raw_text,
                backend: BackendKind::Replay,
                usage: None,
                latency_ms: None,
            }),
            None => Err(GatewayError::CacheMiss {
                digest,
                template_id: prompt.template_id,
            }),
        }
    }
}

/// Wraps another backend and records every successful completion.
pub struct RecordingBackend<B> {
    inner: B,
    cache: ReplayCache,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            cache: ReplayCache::new(),
        }
    }

    pub fn cache(&self) -> &ReplayCache {
        &self.cache
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, prompt: &RenderedPrompt, params: &CompletionParams) -> Result<Completion, GatewayError> {
        let completion = self.inner.complete(prompt, params)?;
        self.cache.insert(CacheEntry {
            digest: prompt.digest(),
            template_id: prompt.template_id,
            raw_text: completion.raw_text.clone(),
        });
        Ok(completion)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Arc<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn complete(&self, prompt: &RenderedPrompt, params: &CompletionParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn complete(&self, prompt: &RenderedPrompt, params: &CompletionParams) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
}

/// OpenAI-style chat-completions client.
pub struct RemoteBackend {
    config: RemoteChatConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Resolves credentials up front so a missing key fails before any
    /// request is made.
    pub fn new(config: RemoteChatConfig, params: &CompletionParams) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        if config.endpoint.trim().is_empty() || config.model.trim().is_empty() {
            return Err(GatewayError::Config("remote backend needs an endpoint and a model".into()));
        }
        Ok(Self {
            client: http::client(Duration::from_secs(params.timeout_secs)),
            config,
            api_key,
        })
    }
}

impl CompletionBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(&self, prompt: &RenderedPrompt, params: &CompletionParams) -> Result<Completion, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let started = Instant::now();
        let resp = http::post_json(
            &self.client,
            &self.config.endpoint,
            self.api_key.as_deref(),
            &body,
            &params.retry_policy(),
        )
        .map_err(|e| match e {
            HttpError::Timeout { .. } => GatewayError::Timeout,
            HttpError::RateLimited { attempts } => GatewayError::RateLimited { attempts },
            other => GatewayError::Remote(other.to_string()),
        })?;
        let raw_text = resp
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| GatewayError::Remote("response has no choices[0].message.content".into()))?
            .to_string();
        let usage = resp.get("usage").map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
        });
        Ok(Completion {
            raw_text,
            backend: BackendKind::Remote,
            usage,
            latency_ms: Some(started.elapsed().as_millis() as u64),
        })
    }
}
