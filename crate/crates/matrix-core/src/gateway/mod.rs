//! Chat-completion backends and usage/cost accounting.
//!
//! Everything that talks to a model goes through [`ChatBackend::complete`]:
//! the assistant, the reflector, the optimizer, and the judge. Two providers
//! implement it — [`http::HttpBackend`] for live chat-completions endpoints
//! and [`scripted::ScriptedBackend`] for deterministic offline runs.

pub mod http;
pub mod scripted;

use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error (HTTP {status}): {message}")]
    Provider { status: u16, message: String },
    #[error("context length exceeded for model `{model}`: {message}")]
    ContextLengthExceeded { model: String, message: String },
    #[error("unknown model `{0}` in cost table")]
    UnknownModel(String),
    #[error("invalid rulebook: {0}")]
    Rulebook(String),
    #[error("malformed chat response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// The trainer treats an over-long optimizer prompt differently from a
    /// dead endpoint.
    pub fn is_context_length(&self) -> bool {
        matches!(self, GatewayError::ContextLengthExceeded { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

/// Reject requests both providers consider malformed: an empty conversation,
/// or an empty system/user message (only assistant content may be empty).
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::InvalidRequest("empty message list".into()));
    }
    for (i, message) in messages.iter().enumerate() {
        if message.content.is_empty() && message.role != ChatRole::Assistant {
            return Err(GatewayError::InvalidRequest(format!(
                "message {i} has empty content for role {:?}",
                message.role
            )));
        }
    }
    Ok(())
}

/// Token and round-trip accounting. `api_calls` counts successful round
/// trips; transport-level retries are tracked separately as telemetry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub api_calls: u64,
}

impl UsageRecord {
    pub fn accumulate(&mut self, other: &UsageRecord) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.api_calls += other.api_calls;
    }

    pub fn plus(mut self, other: &UsageRecord) -> UsageRecord {
        self.accumulate(other);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: UsageRecord,
    pub model: String,
}

/// Decoding parameters. Temperature defaults to 0 everywhere for
/// reproducibility; only the assistant role ever overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens: None,
        }
    }
}

/// Which model serves which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleModelConfig {
    pub assistant_model: String,
    pub reflector_model: String,
    pub optimizer_model: String,
    pub judge_model: String,
}

impl RoleModelConfig {
    /// Same model for every role — the common single-backbone setup.
    pub fn uniform(model: impl Into<String>) -> Self {
        let model = model.into();
        RoleModelConfig {
            assistant_model: model.clone(),
            reflector_model: model.clone(),
            optimizer_model: model.clone(),
            judge_model: model,
        }
    }
}

/// Prices per 1000 tokens for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub prompt_price_per_1k: Decimal,
    pub completion_price_per_1k: Decimal,
}

/// Per-model price table. Lookup of an unlisted model is an error rather
/// than a silent zero so misconfigured runs can't report free tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostTable {
    pub models: BTreeMap<String, ModelPrice>,
}

impl CostTable {
    pub fn insert(
        &mut self,
        model: impl Into<String>,
        prompt_price_per_1k: Decimal,
        completion_price_per_1k: Decimal,
    ) {
        self.models.insert(
            model.into(),
            ModelPrice {
                prompt_price_per_1k,
                completion_price_per_1k,
            },
        );
    }
}

/// Exact-decimal cost of `usage` under `model`'s prices:
/// `prompt_tokens/1000 × prompt_price + completion_tokens/1000 × completion_price`.
pub fn cost_of(
    usage: &UsageRecord,
    model: &str,
    table: &CostTable,
) -> Result<Decimal, GatewayError> {
    let price = table
        .models
        .get(model)
        .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))?;
    let thousand = Decimal::from(1000);
    Ok(
        Decimal::from(usage.prompt_tokens) * price.prompt_price_per_1k / thousand
            + Decimal::from(usage.completion_tokens) * price.completion_price_per_1k / thousand,
    )
}

/// A synchronous chat-completion provider. One call = one model round trip;
/// implementations handle their own transport retries and report
/// `api_calls = 1` per success.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        model: &str,
        params: &DecodingParams,
    ) -> Result<ChatResponse, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(
        &self,
        messages: &[ChatMessage],
        model: &str,
        params: &DecodingParams,
    ) -> Result<ChatResponse, GatewayError> {
        (**self).complete(messages, model, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        model: &str,
        params: &DecodingParams,
    ) -> Result<ChatResponse, GatewayError> {
        (**self).complete(messages, model, params)
    }
}
