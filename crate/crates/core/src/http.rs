//! Minimal JSON-over-HTTP client with bearer auth and retry/backoff, shared
//! by the chat and embedding backends.

use std::thread;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("endpoint returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("invalid response body: {0}")]
    Decode(String),
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    policy: RetryPolicy,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("policy", &self.policy)
            .finish()
    }
}

impl JsonClient {
    pub fn new(api_key: Option<String>, policy: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(policy.timeout))
            .build()
            .into();
        Self {
            agent,
            api_key,
            policy,
        }
    }

    /// Reads the bearer token from `var`, if set and non-empty.
    pub fn from_env(var: &str, policy: RetryPolicy) -> Self {
        let key = std::env::var(var).ok().filter(|k| !k.is_empty());
        Self::new(key, policy)
    }

    /// POSTs `body` and parses the JSON reply. Transport failures, 429 and
    /// 5xx are retried with exponential backoff; any other reply is final.
    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let payload = body.to_string();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut req = self
                .agent
                .post(url)
                .header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let retryable = match req.send(payload.as_str()) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| HttpError::Decode(e.to_string()));
                    match status {
                        200..=299 => {
                            let text = text?;
                            return serde_json::from_str(&text)
                                .map_err(|e| HttpError::Decode(format!("{e}: {text}")));
                        }
                        401 | 403 => {
                            return Err(HttpError::Auth {
                                status,
                                body: text.unwrap_or_default(),
                            })
                        }
                        429 | 500..=599 => HttpError::Status {
                            status,
                            attempts: attempt,
                            body: text.unwrap_or_default(),
                        },
                        _ => {
                            return Err(HttpError::Status {
                                status,
                                attempts: attempt,
                                body: text.unwrap_or_default(),
                            })
                        }
                    }
                }
                Err(e) => HttpError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.policy.max_retries {
                return Err(retryable);
            }
            let backoff = self.policy.initial_backoff * 2u32.saturating_pow(attempt - 1);
            log::warn!("POST {url} failed ({retryable}); retrying in {backoff:?}");
            thread::sleep(backoff);
        }
    }
}
