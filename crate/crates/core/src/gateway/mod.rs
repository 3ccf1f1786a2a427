//! Generation backends.
//!
//! Every backend turns a chat-style [`GenerationRequest`] into text plus
//! per-token log-probabilities with their top-k alternatives. Three
//! implementations ship: [`HttpBackend`] for OpenAI-compatible chat
//! endpoints, [`ScriptedBackend`] which replays fixed replies, and
//! [`SimulatedAgent`] which plays both roles from an answer key.

mod http;
mod scripted;
mod simulated;

use serde::{Deserialize, Serialize};

use crate::protocol::TokenSample;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{spread_distribution, spread_entropy, synthesize_tokens, ScriptedBackend, ScriptedReply};
pub use simulated::{Profile, SimulatedAgent};

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
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs_k: usize,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            max_tokens: 512,
            temperature: 1.0,
            top_logprobs_k: 5,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
    }

    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    BackendError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<TokenSample>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend rejected the request (status {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedBackendResponse(String),
    #[error("script exhausted after {0} replies")]
    ScriptExhausted(usize),
}

impl GatewayError {
    /// Errors worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::BackendUnreachable(_))
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError>;
}

impl<T: GenerationBackend + ?Sized> GenerationBackend for &T {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        (**self).generate(request)
    }
}

impl<T: GenerationBackend + ?Sized> GenerationBackend for Box<T> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        (**self).generate(request)
    }
}

/// Checks the token contract shared by all backends: no positive
/// log-probabilities, alternatives sorted descending and at most `k` long,
/// token texts concatenating to `text` when tokens are present.
pub fn check_result(result: &GenerationResult, k: usize) -> Result<(), GatewayError> {
    for (i, t) in result.tokens.iter().enumerate() {
        if t.logprob.is_nan() || t.logprob > 0.0 {
            return Err(GatewayError::MalformedBackendResponse(format!(
                "token {i} ({:?}) has logprob {}",
                t.text, t.logprob
            )));
        }
        if t.top_alternatives.len() > k {
            return Err(GatewayError::MalformedBackendResponse(format!(
                "token {i} has {} alternatives, more than {k}",
                t.top_alternatives.len()
            )));
        }
        if let Some(a) = t
            .top_alternatives
            .iter()
            .find(|a| a.logprob.is_nan() || a.logprob > 0.0)
        {
            return Err(GatewayError::MalformedBackendResponse(format!(
                "alternative {:?} of token {i} has logprob {}",
                a.token, a.logprob
            )));
        }
        if t.top_alternatives.windows(2).any(|w| w[0].logprob < w[1].logprob) {
            return Err(GatewayError::MalformedBackendResponse(format!(
                "alternatives of token {i} are not sorted"
            )));
        }
    }
    if !result.tokens.is_empty() {
        let joined: String = result.tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != result.text {
            return Err(GatewayError::MalformedBackendResponse(
                "token texts do not concatenate to the message content".into(),
            ));
        }
    }
    Ok(())
}

/// Calls `backend`, retrying transient failures up to `retries` extra times.
pub fn generate_with_retry(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest,
    retries: u32,
) -> Result<GenerationResult, GatewayError> {
    let mut attempt = 0;
    loop {
        match backend.generate(request) {
            Err(e) if e.is_transient() && attempt < retries => {
                attempt += 1;
                log::warn!("generation failed ({e}); retry {attempt}/{retries}");
            }
            other => return other,
        }
    }
}

/// 64-bit FNV-1a, used to derive reproducible per-call seeds.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
