//! Inference backends.
//!
//! Every model sits behind [`Backend`], a single blocking "prompt plus
//! attachments in, text out" call. [`BackendRegistry`] owns the configured
//! backends and adds the attachment cap, a per-backend in-flight limit and
//! retry with exponential backoff.

mod http;
mod mock;
mod score;
mod template;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpApi, HttpBackend, HttpSettings};
pub use mock::{request_digest, MockBackend, MockEntry, MockFailure};
pub use score::{parse_score, ScoreError};
pub use template::{builtin, PromptTemplate, TemplateError, BUILTIN_NAMES};

/// Attachment cap when none is configured: one per sampled frame.
pub const DEFAULT_MAX_ATTACHMENTS: usize = crate::sampler::DEFAULT_SEGMENTS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    /// Stable display name; part of the mock digest.
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationControls {
    pub max_tokens: u32,
    pub temperature: f32,
}

impl Default for GenerationControls {
    fn default() -> Self {
        Self {
            max_tokens: 1024,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub backend_id: String,
    pub prompt: String,
    pub attachments: Vec<Attachment>,
    pub controls: GenerationControls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend `{backend}` timed out after {attempts} attempt(s)")]
    Timeout { backend: String, attempts: u32 },
    #[error("transport failure talking to `{backend}`: {message}")]
    Transport { backend: String, message: String },
    #[error("backend `{backend}` failed{}: {message}", status.map(|s| format!(" with status {s}")).unwrap_or_default())]
    Backend {
        backend: String,
        status: Option<u16>,
        message: String,
    },
    #[error("{count} attachment(s) exceed the cap of {cap} for `{backend}`")]
    AttachmentTooLarge {
        backend: String,
        count: usize,
        cap: usize,
    },
    #[error("cannot read attachment {path}: {message}")]
    Attachment { path: PathBuf, message: String },
}

/// Outcome of a single attempt that did not produce text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptFailure {
    pub error: BackendError,
    /// True only when no byte of a response body was consumed.
    pub retryable: bool,
}

impl AttemptFailure {
    pub fn retryable(error: BackendError) -> Self {
        Self { error, retryable: true }
    }

    pub fn fatal(error: BackendError) -> Self {
        Self { error, retryable: false }
    }
}

/// HTTP statuses worth retrying when the body has not been read.
pub fn is_transient_status(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

/// A model endpoint. Implementations must be usable from many threads.
pub trait Backend: Send + Sync {
    fn attempt(&self, request: &InferenceRequest) -> Result<String, AttemptFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Additional attempts after the first.
    pub retries: u32,
    pub backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(retries: u32) -> Self {
        Self {
            retries,
            backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
        }
    }

    /// Delay before retry number `n` (0-based): `backoff * 2^n`, capped.
    pub fn delay(&self, n: u32) -> Duration {
        self.backoff
            .checked_mul(1u32.checked_shl(n).unwrap_or(u32::MAX))
            .unwrap_or(self.max_backoff)
            .min(self.max_backoff)
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct BackendSlot {
    backend: Box<dyn Backend>,
    retry: RetryPolicy,
    max_attachments: usize,
    gate: Gate,
}

/// Registered backends by id.
#[derive(Default)]
pub struct BackendRegistry {
    slots: BTreeMap<String, BackendSlot>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        id: impl Into<String>,
        backend: Box<dyn Backend>,
        retry: RetryPolicy,
        max_attachments: usize,
        max_in_flight: usize,
    ) {
        self.slots.insert(
            id.into(),
            BackendSlot {
                backend,
                retry,
                max_attachments,
                gate: Gate::new(max_in_flight),
            },
        );
    }

    pub fn contains(&self, id: &str) -> bool {
        self.slots.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn complete(&self, request: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        let backend = request.backend_id.clone();
        let slot = self.slots.get(&backend).ok_or_else(|| BackendError::Backend {
            backend: backend.clone(),
            status: None,
            message: "backend is not registered".into(),
        })?;
        if request.attachments.len() > slot.max_attachments {
            return Err(BackendError::AttachmentTooLarge {
                backend,
                count: request.attachments.len(),
                cap: slot.max_attachments,
            });
        }

        let _permit = slot.gate.acquire();
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            match slot.backend.attempt(request) {
                Ok(text) => {
                    return Ok(InferenceResponse {
                        text,
                        latency: started.elapsed(),
                        backend_id: backend,
                    })
                }
                Err(failure) if failure.retryable && attempt < slot.retry.retries => {
                    log::debug!("{backend}: attempt {} failed: {}", attempt + 1, failure.error);
                    thread::sleep(slot.retry.delay(attempt));
                    attempt += 1;
                }
                Err(failure) => {
                    return Err(match failure.error {
                        BackendError::Timeout { backend, .. } => BackendError::Timeout {
                            backend,
                            attempts: attempt + 1,
                        },
                        other => other,
                    })
                }
            }
        }
    }
}
