//! HTTP client backend.
//!
//! Two request shapes are supported. `native` POSTs to `base_url`:
//!
//! ```json
//! {"model": "...", "prompt": "...",
//!  "attachments": [{"name": "f.jpg", "media_type": "image/jpeg", "data": "<base64>"}],
//!  "max_tokens": 1024, "temperature": 0.0}
//! ```
//!
//! and expects `{"text": "..."}` back. `openai_chat` POSTs a single user
//! message with text and `data:` URL image parts to
//! `<base_url>/chat/completions` and reads `choices[0].message.content`.

use std::fs;
use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{is_transient_status, AttemptFailure, Backend, BackendError, InferenceRequest};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HttpApi {
    #[default]
    Native,
    OpenaiChat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpSettings {
    pub base_url: String,
    pub api: HttpApi,
    pub model: Option<String>,
    pub auth_token: Option<String>,
    pub timeout: Duration,
}

pub struct HttpBackend {
    id: String,
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, settings: HttpSettings) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()?;
        Ok(Self {
            id: id.into(),
            settings,
            client,
        })
    }

    fn endpoint(&self) -> String {
        let base = self.settings.base_url.trim_end_matches('/');
        match self.settings.api {
            HttpApi::Native => base.to_string(),
            HttpApi::OpenaiChat => format!("{base}/chat/completions"),
        }
    }

    fn body(&self, request: &InferenceRequest) -> Result<Value, BackendError> {
        let mut parts = Vec::with_capacity(request.attachments.len());
        for a in &request.attachments {
            let bytes = fs::read(&a.path).map_err(|e| BackendError::Attachment {
                path: a.path.clone(),
                message: e.to_string(),
            })?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            parts.push((a.name.as_str(), media_type(&a.path), data));
        }
        let controls = request.controls;
        Ok(match self.settings.api {
            HttpApi::Native => json!({
                "model": self.settings.model,
                "prompt": request.prompt,
                "attachments": parts.iter().map(|(name, mt, data)| json!({
                    "name": name, "media_type": mt, "data": data,
                })).collect::<Vec<_>>(),
                "max_tokens": controls.max_tokens,
                "temperature": controls.temperature,
            }),
            HttpApi::OpenaiChat => {
                let mut content = vec![json!({"type": "text", "text": request.prompt})];
                content.extend(parts.iter().map(|(_, mt, data)| {
                    json!({"type": "image_url", "image_url": {"url": format!("data:{mt};base64,{data}")}})
                }));
                json!({
                    "model": self.settings.model,
                    "messages": [{"role": "user", "content": content}],
                    "max_tokens": controls.max_tokens,
                    "temperature": controls.temperature,
                })
            }
        })
    }

    fn extract_text(&self, value: &Value) -> Option<String> {
        let text = match self.settings.api {
            HttpApi::Native => value.get("text"),
            HttpApi::OpenaiChat => value.pointer("/choices/0/message/content"),
        };
        text.and_then(Value::as_str).map(String::from)
    }
}

fn media_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("wav") => "audio/wav",
        Some("mp3") => "audio/mpeg",
        _ => "application/octet-stream",
    }
}

impl Backend for HttpBackend {
    fn attempt(&self, request: &InferenceRequest) -> Result<String, AttemptFailure> {
        let backend = self.id.clone();
        let body = self.body(request).map_err(AttemptFailure::fatal)?;
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(token) = &self.settings.auth_token {
            call = call.bearer_auth(token);
        }

        // Failures before any response byte arrives are safe to retry.
        let response = call.send().map_err(|e| {
            AttemptFailure::retryable(if e.is_timeout() {
                BackendError::Timeout { backend: backend.clone(), attempts: 1 }
            } else {
                BackendError::Transport { backend: backend.clone(), message: e.to_string() }
            })
        })?;

        let status = response.status();
        if !status.is_success() && is_transient_status(status.as_u16()) {
            return Err(AttemptFailure::retryable(BackendError::Backend {
                backend,
                status: Some(status.as_u16()),
                message: status.canonical_reason().unwrap_or("transient failure").into(),
            }));
        }

        // From here on the body is being consumed; nothing is retried.
        let bytes = response.bytes().map_err(|e| {
            AttemptFailure::fatal(BackendError::Transport {
                backend: backend.clone(),
                message: format!("reading response body: {e}"),
            })
        })?;
        if !status.is_success() {
            let mut message = String::from_utf8_lossy(&bytes).into_owned();
            message.truncate(message.floor_char_boundary(512));
            return Err(AttemptFailure::fatal(BackendError::Backend {
                backend,
                status: Some(status.as_u16()),
                message,
            }));
        }
        serde_json::from_slice::<Value>(&bytes)
            .ok()
            .and_then(|v| self.extract_text(&v))
            .ok_or_else(|| {
                AttemptFailure::fatal(BackendError::Backend {
                    backend,
                    status: Some(status.as_u16()),
                    message: "response body has no text field".into(),
                })
            })
    }
}
