//! Errors, retry policy and HTTP plumbing shared by the embedding and
//! language-model providers.

use std::future::Future;
use std::time::Duration;

use serde::{de::DeserializeOwned, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot decode provider response: {0}")]
    Decode(String),
    #[error("invalid provider input: {0}")]
    InvalidInput(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub max_retries: u32,
    /// Per-attempt timeout.
    pub timeout: Duration,
    /// Delay before the first retry; doubled for each further retry.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Run `attempt` until it succeeds, fails with a non-retryable error, or
    /// the retry budget is spent. Each attempt is bounded by `timeout`.
    pub async fn run<T, F, Fut>(&self, mut attempt: F) -> Result<T, ProviderError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, ProviderError>>,
    {
        let mut delay = self.backoff;
        let mut tries = 0;
        loop {
            tries += 1;
            let result = match tokio::time::timeout(self.timeout, attempt()).await {
                Ok(r) => r,
                Err(_) => Err(ProviderError::Transport {
                    message: format!("timed out after {:?}", self.timeout),
                    attempts: tries,
                }),
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && tries <= self.max_retries => {
                    tracing::warn!(attempt = tries, error = %e, "provider call failed, retrying");
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                }
                Err(ProviderError::Transport { message, .. }) => {
                    return Err(ProviderError::Transport {
                        message,
                        attempts: tries,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Endpoint settings for a remote provider.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    /// Read `url_var` and `model_var` plus `CDR_AGENT_API_KEY` from the
    /// environment.
    pub fn from_env(url_var: &str, model_var: &str) -> Result<Self, ProviderError> {
        let url = std::env::var(url_var)
            .map_err(|_| ProviderError::Config(format!("{url_var} is not set")))?;
        let model = std::env::var(model_var)
            .map_err(|_| ProviderError::Config(format!("{model_var} is not set")))?;
        Ok(RemoteConfig {
            url,
            model,
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
        })
    }
}

pub const API_KEY_VAR: &str = "CDR_AGENT_API_KEY";

pub(crate) async fn post_json<B: Serialize + ?Sized, R: DeserializeOwned>(
    client: &reqwest::Client,
    config: &RemoteConfig,
    body: &B,
) -> Result<R, ProviderError> {
    config
        .retry
        .run(|| async {
            let mut req = client.post(&config.url).json(body);
            if let Some(key) = &config.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().await.map_err(|e| ProviderError::Transport {
                message: e.to_string(),
                attempts: 1,
            })?;
            let status = resp.status();
            if !status.is_success() {
                let body = resp.text().await.unwrap_or_default();
                return Err(ProviderError::Status {
                    status: status.as_u16(),
                    body: truncate(&body, 512),
                });
            }
            resp.json::<R>()
                .await
                .map_err(|e| ProviderError::Decode(e.to_string()))
        })
        .await
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}
