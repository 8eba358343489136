//! Minimal JSON-over-HTTP client shared by the external embedder and
//! annotation slots. Plain-HTTP endpoints with fixed-backoff retries;
//! failures map onto retryable client errors.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Fixed delay between attempts.
    pub retry_backoff_ms: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            endpoint: String::new(),
            timeout_ms: 10_000,
            retries: 2,
            retry_backoff_ms: 200,
        }
    }
}

impl HttpClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(CoreError::Config(
                "external client endpoint is not configured".into(),
            ));
        }
        if self.timeout_ms == 0 {
            return Err(CoreError::Config("client timeout must be positive".into()));
        }
        Ok(())
    }
}

/// POST a JSON body and parse the JSON response, retrying on transport
/// errors and 5xx responses.
pub fn post_json(cfg: &HttpClientConfig, body: &serde_json::Value) -> Result<serde_json::Value> {
    cfg.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build()
        .map_err(|e| CoreError::Client {
            message: format!("client construction failed: {e}"),
            retryable: false,
        })?;
    let attempts = cfg.retries + 1;
    let mut last_err = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.retry_backoff_ms));
        }
        match client.post(&cfg.endpoint).json(body).send() {
            Err(e) => last_err = format!("transport error: {e}"),
            Ok(resp) => {
                let status = resp.status();
                if status.is_server_error() {
                    last_err = format!("server error: {status}");
                    continue;
                }
                if !status.is_success() {
                    return Err(CoreError::Client {
                        message: format!("request rejected: {status}"),
                        retryable: false,
                    });
                }
                return resp.json().map_err(|e| CoreError::Client {
                    message: format!("bad JSON response: {e}"),
                    retryable: false,
                });
            }
        }
    }
    Err(CoreError::Client {
        message: format!("{last_err} (after {attempts} attempts)"),
        retryable: true,
    })
}
