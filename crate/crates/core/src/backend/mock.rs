//! Scripted backend that replays canned responses.
//!
//! Entries are matched, in order of precedence, by exact request digest,
//! by the first `prompt_contains` entry whose needle occurs in the prompt,
//! and finally by a catch-all entry that has neither key.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{is_transient_status, AttemptFailure, Backend, BackendError, InferenceRequest};
use crate::jsonl::{self, JsonlError};

/// SHA-256 over the prompt and attachment names, hex encoded.
pub fn request_digest(prompt: &str, attachment_names: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    for name in attachment_names {
        h.update(name.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    Transport,
    Status { status: u16, message: String },
}

/// One line of a mock script.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
}

impl MockEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn for_digest(mut self, digest: impl Into<String>) -> Self {
        self.digest = Some(digest.into());
        self
    }

    pub fn when_prompt_contains(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains = Some(needle.into());
        self
    }

    pub fn failing(error: MockFailure) -> Self {
        Self {
            error: Some(error),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    by_digest: HashMap<String, MockEntry>,
    by_substring: Vec<(String, MockEntry)>,
    fallback: Option<MockEntry>,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, entries: impl IntoIterator<Item = MockEntry>) -> Self {
        let mut me = Self {
            id: id.into(),
            by_digest: HashMap::new(),
            by_substring: Vec::new(),
            fallback: None,
        };
        for e in entries {
            match (&e.digest, &e.prompt_contains) {
                (Some(d), _) => {
                    me.by_digest.entry(d.clone()).or_insert(e);
                }
                (None, Some(s)) => me.by_substring.push((s.clone(), e)),
                (None, None) => {
                    me.fallback.get_or_insert(e);
                }
            }
        }
        me
    }

    pub fn load(id: impl Into<String>, script: &Path) -> Result<Self, JsonlError> {
        Ok(Self::new(id, jsonl::read::<MockEntry>(script)?))
    }

    fn lookup(&self, request: &InferenceRequest) -> Option<&MockEntry> {
        let names: Vec<&str> = request.attachments.iter().map(|a| a.name.as_str()).collect();
        let digest = request_digest(&request.prompt, &names);
        self.by_digest
            .get(&digest)
            .or_else(|| {
                self.by_substring
                    .iter()
                    .find(|(needle, _)| request.prompt.contains(needle.as_str()))
                    .map(|(_, e)| e)
            })
            .or(self.fallback.as_ref())
    }
}

impl Backend for MockBackend {
    fn attempt(&self, request: &InferenceRequest) -> Result<String, AttemptFailure> {
        let backend = self.id.clone();
        let Some(entry) = self.lookup(request) else {
            return Err(AttemptFailure::fatal(BackendError::Backend {
                backend,
                status: Some(404),
                message: "no scripted response for request".into(),
            }));
        };
        match &entry.error {
            Some(MockFailure::Timeout) => Err(AttemptFailure::retryable(BackendError::Timeout {
                backend,
                attempts: 1,
            })),
            Some(MockFailure::Transport) => Err(AttemptFailure::retryable(BackendError::Transport {
                backend,
                message: "scripted transport failure".into(),
            })),
            Some(MockFailure::Status { status, message }) => Err(AttemptFailure {
                retryable: is_transient_status(*status),
                error: BackendError::Backend {
                    backend,
                    status: Some(*status),
                    message: message.clone(),
                },
            }),
            None => Ok(entry.text.clone().unwrap_or_default()),
        }
    }
}
