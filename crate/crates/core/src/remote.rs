//! HTTP backend for driving real model endpoints through the episode
//! runner.
//!
//! Wire protocol: `POST <endpoint>` with body
//! `{"prompt": ..., "agent_id": ..., "correlation_id": ...}`, response
//! `{"text": ...}`, UTF-8 throughout. Responses larger than the configured
//! cap are rejected rather than truncated.

use crate::agents::AgentBackend;
use crate::error::{Error, Result};
use crate::types::AgentSpec;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::time::Duration;

pub const DEFAULT_RESPONSE_CAP_BYTES: usize = 64 * 1024;
pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_TIMEOUT_SECS: u64 = 10;

/// Environment variable holding the optional bearer token for remote
/// endpoints.
pub const REMOTE_TOKEN_ENV: &str = "CONJSIM_REMOTE_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteBackendConfig {
    pub endpoint: String,
    /// Additional attempts after the first transport failure.
    pub max_retries: u32,
    pub response_cap_bytes: usize,
    pub timeout_secs: u64,
    /// Bearer token sent with each request when present.
    pub auth_token: Option<String>,
}

impl RemoteBackendConfig {
    pub fn new(endpoint: &str) -> Self {
        RemoteBackendConfig {
            endpoint: endpoint.to_string(),
            max_retries: DEFAULT_MAX_RETRIES,
            response_cap_bytes: DEFAULT_RESPONSE_CAP_BYTES,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            auth_token: None,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    agent_id: &'a str,
    correlation_id: String,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Blocking HTTP backend. Concurrent in-flight requests are bounded by the
/// episode-level thread pool; responses are matched to requests by
/// correlation id.
pub struct RemoteBackend {
    config: RemoteBackendConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config("remote endpoint must be set".to_string()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build http client: {e}")))?;
        Ok(RemoteBackend { config, client })
    }

    fn send_once(
        &self,
        prompt: &str,
        agent: &AgentSpec,
    ) -> std::result::Result<reqwest::blocking::Response, String> {
        let request = WireRequest {
            prompt,
            agent_id: &agent.id,
            correlation_id: uuid::Uuid::new_v4().to_string(),
        };
        let mut builder = self.client.post(&self.config.endpoint).json(&request);
        if let Some(token) = &self.config.auth_token {
            builder = builder.bearer_auth(token);
        }
        builder.send().map_err(|e| e.to_string())
    }

    fn read_capped(&self, response: reqwest::blocking::Response) -> Result<String> {
        let cap = self.config.response_cap_bytes;
        let mut body = Vec::with_capacity(cap.min(8 * 1024));
        let mut limited = response.take((cap + 1) as u64);
        limited.read_to_end(&mut body)?;
        if body.len() > cap {
            return Err(Error::ResponseTooLarge {
                endpoint: self.config.endpoint.clone(),
                cap_bytes: cap,
            });
        }
        let parsed: WireResponse = serde_json::from_slice(&body).map_err(|e| {
            Error::Validation(format!(
                "malformed response from {}: {e}",
                self.config.endpoint
            ))
        })?;
        Ok(parsed.text)
    }
}

impl AgentBackend for RemoteBackend {
    fn respond(&self, prompt: &str, agent: &AgentSpec, _rng: &mut dyn RngCore) -> Result<String> {
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for _ in 0..attempts {
            match self.send_once(prompt, agent) {
                Ok(response) => {
                    let status = response.status();
                    if !status.is_success() {
                        return Err(Error::Protocol {
                            endpoint: self.config.endpoint.clone(),
                            status: status.as_u16(),
                        });
                    }
                    return self.read_capped(response);
                }
                Err(detail) => last_error = detail,
            }
        }
        Err(Error::Transport {
            endpoint: self.config.endpoint.clone(),
            attempts,
            detail: last_error,
        })
    }
}
