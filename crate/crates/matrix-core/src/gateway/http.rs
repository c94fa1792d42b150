//! Live chat-completions client.
//!
//! Speaks the ubiquitous `POST {base}/chat/completions` JSON protocol.
//! Transport failures and HTTP 429/5xx are retried with exponential backoff
//! (1 s, 2 s, 4 s by default); an over-long prompt surfaces as
//! [`GatewayError::ContextLengthExceeded`] so the trainer can react to it
//! instead of aborting the run.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    validate_messages, ChatBackend, ChatMessage, ChatResponse, DecodingParams, GatewayError,
    UsageRecord,
};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL up to but excluding `/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Retries after the first attempt, on transport errors and 429/5xx.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry. Tests shrink this.
    pub backoff_base: Duration,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    retries: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            config,
            client,
            retries: AtomicU64::new(0),
        })
    }

    /// Total transport-level retries performed so far (telemetry; retries do
    /// not count as api_calls).
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.config.backoff_base * 2u32.saturating_pow(attempt)
    }
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        model: &str,
        params: &DecodingParams,
    ) -> Result<ChatResponse, GatewayError> {
        validate_messages(messages)?;
        let body = request_body(messages, model, params);
        let url = self.endpoint();

        let mut attempt = 0u32;
        loop {
            let mut request = self.client.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                request = request.bearer_auth(key);
            }

            let retryable_failure: String = match request.send() {
                Err(e) => format!("transport: {e}"),
                Ok(response) => {
                    let status = response.status().as_u16();
                    let text = response.text().map_err(|e| GatewayError::Transport {
                        attempts: attempt + 1,
                        message: format!("reading body: {e}"),
                    })?;
                    if (200..300).contains(&status) {
                        return parse_success_body(&text, model);
                    }
                    if status == 429 || status >= 500 {
                        format!("HTTP {status}: {}", error_message(&text))
                    } else {
                        return Err(classify_client_error(status, &text, model));
                    }
                }
            };

            if attempt >= self.config.max_retries {
                return Err(GatewayError::Transport {
                    attempts: attempt + 1,
                    message: retryable_failure,
                });
            }
            tracing::debug!(attempt, %retryable_failure, "retrying chat completion");
            std::thread::sleep(self.backoff(attempt));
            self.retries.fetch_add(1, Ordering::Relaxed);
            attempt += 1;
        }
    }
}

pub(crate) fn request_body(
    messages: &[ChatMessage],
    model: &str,
    params: &DecodingParams,
) -> serde_json::Value {
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": params.temperature,
    });
    if let Some(max_tokens) = params.max_tokens {
        body["max_tokens"] = json!(max_tokens);
    }
    body
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: WireUsage,
    #[serde(default)]
    model: Option<String>,
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

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize, Default)]
struct WireError {
    #[serde(default)]
    error: WireErrorBody,
}

#[derive(Deserialize, Default)]
struct WireErrorBody {
    #[serde(default)]
    message: String,
    #[serde(default)]
    code: Option<String>,
}

pub(crate) fn parse_success_body(text: &str, model: &str) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse = serde_json::from_str(text)
        .map_err(|e| GatewayError::MalformedResponse(format!("{e}; body: {text}")))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("no choices".to_string()))?;
    Ok(ChatResponse {
        content: choice.message.content.unwrap_or_default(),
        usage: UsageRecord {
            prompt_tokens: wire.usage.prompt_tokens,
            completion_tokens: wire.usage.completion_tokens,
            api_calls: 1,
        },
        model: wire.model.unwrap_or_else(|| model.to_string()),
    })
}

fn error_message(text: &str) -> String {
    match serde_json::from_str::<WireError>(text) {
        Ok(wire) if !wire.error.message.is_empty() => wire.error.message,
        _ => text.chars().take(400).collect(),
    }
}

fn classify_client_error(status: u16, text: &str, model: &str) -> GatewayError {
    let wire: WireError = serde_json::from_str(text).unwrap_or_default();
    let message = if wire.error.message.is_empty() {
        text.chars().take(400).collect()
    } else {
        wire.error.message.clone()
    };
    let lowered = message.to_lowercase();
    let context_exceeded = wire.error.code.as_deref() == Some("context_length_exceeded")
        || lowered.contains("context length")
        || lowered.contains("maximum context");
    if context_exceeded {
        GatewayError::ContextLengthExceeded {
            model: model.to_string(),
            message,
        }
    } else {
        GatewayError::Provider { status, message }
    }
}
