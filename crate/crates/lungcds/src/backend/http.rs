//! Live chat-completion backend over HTTP.
//!
//! Speaks the common chat-completions JSON shape (message list, optional
//! inline images by data URL). Transport failures and HTTP 429/5xx responses
//! are retried with exponential backoff up to the configured budget; auth
//! failures and malformed payloads are not.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    BackendConfig, BackendError, CallOutcome, MessagePart, ModelBackend, ModelRequest,
    ModelResponse, Role, Usage,
};

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    /// Base backoff delay; tests shrink it.
    backoff_ms: u64,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            config,
            client,
            backoff_ms: 200,
        })
    }

    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = ms;
        self
    }

    fn api_key(&self) -> Option<String> {
        if self.config.api_key_env_var.is_empty() {
            return None;
        }
        std::env::var(&self.config.api_key_env_var).ok()
    }

    fn body_for(&self, request: &ModelRequest) -> Result<Value, BackendError> {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_prompt}));
        }
        for msg in &request.messages {
            let role = match msg.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let mut content = Vec::new();
            for part in &msg.parts {
                match part {
                    MessagePart::Text { text } => {
                        content.push(json!({"type": "text", "text": text}));
                    }
                    MessagePart::Image { image_ref } => {
                        let bytes = std::fs::read(image_ref).map_err(|e| {
                            BackendError::InvalidRequest(format!(
                                "cannot read image {image_ref}: {e}"
                            ))
                        })?;
                        let mime = if image_ref.ends_with(".jpg") || image_ref.ends_with(".jpeg") {
                            "image/jpeg"
                        } else {
                            "image/png"
                        };
                        content.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{mime};base64,{}", base64_encode(&bytes))}
                        }));
                    }
                }
            }
            messages.push(json!({"role": role, "content": content}));
        }
        Ok(json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }))
    }
}

impl ModelBackend for HttpBackend {
    fn call(&self, request: &ModelRequest) -> Result<CallOutcome, BackendError> {
        request.validate()?;
        let body = self.body_for(request)?;
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            let mut builder = self
                .client
                .post(&self.config.endpoint_url)
                .header("content-type", "application/json");
            if let Some(key) = self.api_key() {
                builder = builder.bearer_auth(key);
            }
            let outcome = builder.json(&body).send();
            let retryable_reason = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let payload: Value = resp
                            .json()
                            .map_err(|e| BackendError::BadResponse(e.to_string()))?;
                        let text = payload["choices"][0]["message"]["content"]
                            .as_str()
                            .map(|s| s.to_string())
                            .or_else(|| payload["choices"][0]["text"].as_str().map(String::from))
                            .ok_or_else(|| {
                                BackendError::BadResponse("no completion text in payload".into())
                            })?;
                        let usage = Usage {
                            prompt_tokens: payload["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
                            output_tokens: payload["usage"]["completion_tokens"]
                                .as_u64()
                                .unwrap_or(0),
                        };
                        return Ok(CallOutcome {
                            response: ModelResponse {
                                text,
                                usage,
                                latency_ms: started.elapsed().as_millis() as u64,
                            },
                            retries,
                        });
                    } else if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(BackendError::Auth(format!("http {status}")));
                    } else if status.as_u16() == 429 || status.is_server_error() {
                        Some(status.as_u16())
                    } else {
                        return Err(BackendError::Transport(format!("http {status}")));
                    }
                }
                Err(e) if e.is_timeout() => {
                    if retries >= self.config.max_retries {
                        return Err(BackendError::Timeout);
                    }
                    None
                }
                Err(e) => {
                    if retries >= self.config.max_retries {
                        return Err(BackendError::Transport(e.to_string()));
                    }
                    None
                }
            };
            if retries >= self.config.max_retries {
                // Only reachable for 429/5xx here; transport errors returned above.
                if retryable_reason == Some(429) {
                    return Err(BackendError::RateLimited {
                        attempts: retries + 1,
                    });
                }
                return Err(BackendError::Transport(format!(
                    "http {} after {} attempts",
                    retryable_reason.unwrap_or(0),
                    retries + 1
                )));
            }
            std::thread::sleep(Duration::from_millis(self.backoff_ms << retries));
            retries += 1;
        }
    }
}

fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [
            chunk[0],
            chunk.get(1).copied().unwrap_or(0),
            chunk.get(2).copied().unwrap_or(0),
        ];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            TABLE[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            TABLE[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}
