//! Chat-completion transport shared by description, QA generation, model
//! evaluation and grading.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

pub const LLM_API_KEY_ENV: &str = "ULTIMA_LLM_API_KEY";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Other(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    /// PNG-encoded images attached after the text.
    pub images: Vec<Vec<u8>>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn with_image(mut self, png: Vec<u8>) -> Self {
        self.images.push(png);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            messages,
            temperature,
            max_tokens: None,
        }
    }

    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.text.as_str())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
    }

    /// OpenAI-style JSON body. Messages without images carry plain string
    /// content; messages with images use the typed-part array form.
    pub fn to_wire(&self, model: &str) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content = if m.images.is_empty() {
                    Value::String(m.text.clone())
                } else {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    for png in &m.images {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                        parts.push(json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:image/png;base64,{b64}")}
                        }));
                    }
                    Value::Array(parts)
                };
                json!({"role": m.role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": self.temperature,
        });
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[async_trait]
pub trait ChatClient: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[async_trait]
impl<T: ChatClient + ?Sized> ChatClient for Arc<T> {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request).await
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.7,
            timeout_secs: 60,
            max_retries: 3,
            api_key_env: LLM_API_KEY_ENV.into(),
        }
    }
}

/// Chat-completion client for OpenAI-compatible endpoints.
pub struct HttpChatClient {
    config: LlmConfig,
    api_key: Option<String>,
    http: reqwest::Client,
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, api_key, http })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    async fn attempt(&self, body: &Value) -> Result<String, LlmError> {
        let mut req = self.http.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        extract_reply(&text)
    }
}

/// Pull `choices[0].message.content` out of a chat-completion response body.
pub fn extract_reply(body: &str) -> Result<String, LlmError> {
    let value: Value = serde_json::from_str(body).map_err(|e| LlmError::Protocol(format!("{e}: {body}")))?;
    if let Some(err) = value.get("error") {
        return Err(LlmError::Other(err.to_string()));
    }
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| LlmError::Protocol(format!("no choices[0].message.content in {body}")))
}

#[async_trait]
impl ChatClient for HttpChatClient {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let body = request.to_wire(&self.config.model);
        let mut attempt = 0;
        loop {
            match self.attempt(&body).await {
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    attempt += 1;
                    warn!(attempt, error = %e, "chat completion failed, retrying");
                    tokio::time::sleep(Duration::from_millis(200 << attempt.min(6))).await;
                }
                other => return other,
            }
        }
    }
}

/// Replays a fixed queue of replies and records every request it sees.
#[derive(Default)]
pub struct ScriptedChatClient {
    replies: Mutex<VecDeque<Result<String, LlmError>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChatClient {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn from_results(replies: impl IntoIterator<Item = Result<String, LlmError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().clone()
    }
}

#[async_trait]
impl ChatClient for ScriptedChatClient {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.requests.lock().push(request.clone());
        self.replies
            .lock()
            .pop_front()
            .unwrap_or_else(|| Err(LlmError::Other("scripted client has no replies left".into())))
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync;

/// Computes each reply from the request; used for offline runs.
pub struct FnChatClient {
    reply: Box<ReplyFn>,
}

impl FnChatClient {
    pub fn new(reply: impl Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync + 'static) -> Self {
        Self { reply: Box::new(reply) }
    }
}

#[async_trait]
impl ChatClient for FnChatClient {
    async fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (self.reply)(request)
    }
}
