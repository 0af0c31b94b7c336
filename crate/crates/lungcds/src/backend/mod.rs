//! Uniform contract for chat-completion backends.
//!
//! Every pipeline stage talks to a [`ModelBackend`]: a live HTTP service
//! ([`HttpBackend`]) or a scripted replay ([`ScriptedBackend`]) that answers
//! from canned rules and records a transcript. Structured replies are pulled
//! out of free-form completions by [`parse_structured`].

mod http;
mod scripted;
mod structured;

pub use http::HttpBackend;
pub use scripted::{scripted_backend, ScriptRule, ScriptedBackend};
pub use structured::{parse_structured, FieldKind, FieldSpec, StructSchema, StructuredError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How case documents are presented to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Page images are attached; document text is withheld.
    ImageDirect,
    /// Pre-extracted text is sent; images are withheld.
    TextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MessagePart {
    Text { text: String },
    Image { image_ref: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

impl Message {
    pub fn user_text(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            parts: vec![MessagePart::Text { text: text.into() }],
        }
    }
}

/// One request to a backend. `tag` labels the pipeline stage for scripting
/// and logging ("extract", "t-stage", "judge-rq", ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: String,
}

impl ModelRequest {
    /// A plain single-turn request with the pipeline default temperature 0.
    pub fn simple(tag: impl Into<String>, user_text: impl Into<String>) -> Self {
        ModelRequest {
            system_prompt: String::new(),
            messages: vec![Message::user_text(user_text)],
            temperature: 0.0,
            max_output_tokens: 4096,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("empty message list".into()));
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(BackendError::InvalidRequest(
                "last message must come from the user".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} out of [0, 1]",
                self.temperature
            )));
        }
        for msg in &self.messages {
            for part in &msg.parts {
                match part {
                    MessagePart::Text { text } if text.is_empty() => {
                        return Err(BackendError::InvalidRequest("empty text part".into()));
                    }
                    MessagePart::Image { image_ref } if image_ref.is_empty() => {
                        return Err(BackendError::InvalidRequest("empty image ref".into()));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// All request text (system prompt plus message text parts), used for
    /// script matching and transcript scans.
    pub fn rendered_text(&self) -> String {
        let mut out = self.system_prompt.clone();
        for msg in &self.messages {
            for part in &msg.parts {
                if let MessagePart::Text { text } = part {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(text);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    /// Raw, unmodified completion text.
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// Response plus transport metadata (retries actually performed).
#[derive(Debug, Clone, PartialEq)]
pub struct CallOutcome {
    pub response: ModelResponse,
    pub retries: u32,
}

/// Configuration for a live HTTP chat-completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env_var: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries apply only to transport failures and rate-limit responses.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    2
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("script exhausted: no rule matches request tagged {tag:?}")]
    ScriptExhausted { tag: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend replied with unusable payload: {0}")]
    BadResponse(String),
}

/// A chat-completion backend. Implementations must be callable from several
/// workers concurrently and must never mutate the request.
pub trait ModelBackend: Send + Sync {
    /// Complete a request, reporting transport metadata.
    fn call(&self, request: &ModelRequest) -> Result<CallOutcome, BackendError>;

    /// Complete a request and return only the model response.
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        self.call(request).map(|o| o.response)
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for &T {
    fn call(&self, request: &ModelRequest) -> Result<CallOutcome, BackendError> {
        (**self).call(request)
    }
}

/// One request/response pair kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub request_text: String,
    /// `None` when the call failed.
    pub response_text: Option<String>,
    pub retries: u32,
}

/// Decorator that records every call into an owned transcript. The harness
/// wraps the shared backend with one recorder per case so transcripts stay
/// ordered under parallel execution.
pub struct RecordingBackend<'a> {
    inner: &'a dyn ModelBackend,
    transcript: std::sync::Mutex<Vec<TranscriptEntry>>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn ModelBackend) -> Self {
        RecordingBackend {
            inner,
            transcript: std::sync::Mutex::new(Vec::new()),
        }
    }

    pub fn into_transcript(self) -> Vec<TranscriptEntry> {
        self.transcript.into_inner().expect("transcript lock")
    }
}

impl ModelBackend for RecordingBackend<'_> {
    fn call(&self, request: &ModelRequest) -> Result<CallOutcome, BackendError> {
        let result = self.inner.call(request);
        let entry = TranscriptEntry {
            tag: request.tag.clone(),
            request_text: request.rendered_text(),
            response_text: result.as_ref().ok().map(|o| o.response.text.clone()),
            retries: result.as_ref().map(|o| o.retries).unwrap_or(0),
        };
        self.transcript.lock().expect("transcript lock").push(entry);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation_catches_empty_messages() {
        let req = ModelRequest {
            system_prompt: "s".into(),
            messages: vec![],
            temperature: 0.0,
            max_output_tokens: 16,
            tag: "t".into(),
        };
        assert!(matches!(
            req.validate(),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn request_validation_requires_user_last() {
        let req = ModelRequest {
            system_prompt: String::new(),
            messages: vec![Message {
                role: Role::Assistant,
                parts: vec![MessagePart::Text { text: "hi".into() }],
            }],
            temperature: 0.0,
            max_output_tokens: 16,
            tag: "t".into(),
        };
        assert!(req.validate().is_err());
        assert!(ModelRequest::simple("t", "hello").validate().is_ok());
    }
}
