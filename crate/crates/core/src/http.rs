//! Blocking JSON-over-HTTP with bounded exponential backoff, shared by the
//! remote embedding provider and the remote chat backend.

use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HttpError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response body: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Additional attempts after the first one.
    pub retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << attempt.min(16))
    }
}

pub(crate) fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("TLS backend initialisation")
}

/// POSTs `body` to `url`, retrying 429, 5xx and timeouts with exponential
/// backoff. Other failures are returned immediately.
pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, HttpError> {
    let mut attempt = 0u32;
    loop {
        let mut request = client.post(url).json(body);
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        let err = match request.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp.json::<Value>().map_err(|e| HttpError::Decode(e.to_string()));
                }
                let text = resp.text().unwrap_or_default();
                if status.as_u16() == 429 {
                    HttpError::RateLimited { attempts: attempt + 1 }
                } else if status.is_server_error() {
                    HttpError::Status {
                        status: status.as_u16(),
                        body: text,
                    }
                } else {
                    return Err(HttpError::Status {
                        status: status.as_u16(),
                        body: text,
                    });
                }
            }
            Err(e) if e.is_timeout() => HttpError::Timeout { attempts: attempt + 1 },
            Err(e) => return Err(HttpError::Transport(e.to_string())),
        };
        if attempt >= policy.retries {
            return Err(err);
        }
        log::warn!("{url}: {err}; retrying in {:?}", policy.delay(attempt));
        std::thread::sleep(policy.delay(attempt));
        attempt += 1;
    }
}
