//! Blocking chat-completion client.
//!
//! Speaks the common chat-completion wire format: an HTTP POST of
//! `{"model", "messages": [{"role", "content"}], "temperature"}`, with the
//! reply read from the first choice's message content. Transient failures
//! (network errors and 5xx statuses) are retried with exponential backoff
//! up to a configured cap; any other non-success status fails immediately
//! with the status and body.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::ChatTranscript;

/// Connection settings for one endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Full URL of the chat-completion route.
    pub base_url: String,
    /// Model name sent in every request; also used as the endpoint id on
    /// transcripts and reports.
    pub model: String,
    /// Optional header sent with every request, as (name, value).
    pub auth_header: Option<(String, String)>,
    /// Per-request timeout.
    pub timeout_ms: u64,
    /// Number of retries after the first attempt for transient failures.
    pub retry_cap: u32,
    /// Sleep before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            auth_header: None,
            timeout_ms: 30_000,
            retry_cap: 2,
            backoff_ms: 250,
        }
    }
}

/// A chat-completion endpoint plus the HTTP machinery to talk to it.
pub struct ChatClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .no_proxy()
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(ChatClient { config, http })
    }

    /// The identifier recorded on transcripts produced through this client.
    pub fn endpoint_id(&self) -> &str {
        &self.config.model
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Sends the transcript and returns the assistant reply verbatim.
    ///
    /// The transcript must end on a user message. Network failures and 5xx
    /// statuses are retried `retry_cap` times with doubling backoff, then
    /// reported as a transport error carrying the attempt count; other
    /// non-success statuses fail immediately as endpoint errors; a
    /// well-formed response with an empty reply is a protocol error.
    pub fn chat(&self, transcript: &ChatTranscript) -> Result<String> {
        transcript.validate()?;
        match transcript.messages.last() {
            Some(m) if m.role == super::Role::User => {}
            _ => {
                return Err(Error::Protocol(
                    "transcript must end on a user message to request a reply".into(),
                ))
            }
        }
        let body = request_body(&self.config.model, transcript);
        let attempts = self.config.retry_cap + 1;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u64 << (attempt - 1).min(16);
                thread::sleep(Duration::from_millis(self.config.backoff_ms * factor));
            }
            let mut request = self.http.post(&self.config.base_url).json(&body);
            if let Some((name, value)) = &self.config.auth_header {
                request = request.header(name.as_str(), value.as_str());
            }
            let response = match request.send() {
                Ok(r) => r,
                Err(e) => {
                    last_failure = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status.is_server_error() {
                let text = response.text().unwrap_or_default();
                last_failure = format!("status {}: {}", status.as_u16(), text);
                continue;
            }
            if !status.is_success() {
                return Err(Error::Endpoint {
                    status: status.as_u16(),
                    body: response.text().unwrap_or_default(),
                });
            }
            let payload: Value = response
                .json()
                .map_err(|e| Error::Protocol(format!("unparsable endpoint response: {e}")))?;
            return extract_reply(&payload);
        }
        Err(Error::Transport {
            attempts,
            detail: last_failure,
        })
    }
}

/// Builds the JSON request for one transcript.
fn request_body(model: &str, transcript: &ChatTranscript) -> Value {
    let messages: Vec<Value> = transcript
        .messages
        .iter()
        .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
        .collect();
    json!({
        "model": model,
        "messages": messages,
        "temperature": transcript.temperature,
    })
}

/// Reads the assistant reply out of a chat-completion response.
fn extract_reply(payload: &Value) -> Result<String> {
    let content = payload
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .ok_or_else(|| {
            Error::Protocol("response carries no choices[0].message.content string".into())
        })?;
    if content.is_empty() {
        return Err(Error::Protocol("endpoint returned an empty reply".into()));
    }
    Ok(content.to_string())
}
