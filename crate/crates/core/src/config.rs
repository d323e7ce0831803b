//! Run configuration.
//!
//! A run is described by one JSON file. Relative paths inside it resolve
//! against the directory holding the file. The same structure, after CLI
//! overrides, is what gets written as the effective-config snapshot.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    builtin, BackendRegistry, GenerationControls, HttpApi, HttpBackend, HttpSettings, MockBackend,
    PromptTemplate, RetryPolicy, DEFAULT_MAX_ATTACHMENTS,
};
use crate::caption::{FilterConfig, DEFAULT_THRESHOLD};
use crate::fusion::FusionConfig;
use crate::model::SplitTag;
use crate::sampler::DEFAULT_SEGMENTS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("environment variable `{0}` holding the auth token is not set")]
    MissingEnv(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Http {
        base_url: String,
        #[serde(default)]
        api: HttpApi,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<String>,
        /// Name of the environment variable holding a bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
    },
    Mock {
        script: PathBuf,
    },
}

fn default_max_attachments() -> usize {
    DEFAULT_MAX_ATTACHMENTS
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}
fn default_max_tokens() -> u32 {
    GenerationControls::default().max_tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_max_attachments")]
    pub max_attachments: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f32,
}

impl BackendSpec {
    pub fn controls(&self) -> GenerationControls {
        GenerationControls {
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        }
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.retries,
            backoff: Duration::from_millis(self.backoff_ms),
            max_backoff: Duration::from_secs(30),
        }
    }
}

/// A prediction source: one backend queried with one prompt template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub backend: String,
    pub template: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSection {
    #[serde(default = "default_segments")]
    pub k_segments: usize,
}

fn default_segments() -> usize {
    DEFAULT_SEGMENTS
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            k_segments: DEFAULT_SEGMENTS,
        }
    }
}

fn caption_template() -> String {
    "caption".into()
}
fn judge_template() -> String {
    "judge".into()
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSection {
    /// JSON-lines file of `{"image": path}`.
    pub images: PathBuf,
    pub backend_a: String,
    pub backend_b: String,
    pub judge: String,
    #[serde(default = "caption_template")]
    pub caption_template: String,
    #[serde(default = "judge_template")]
    pub judge_template: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub manifest_split: SplitTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    /// Additional or overriding templates; built-ins are always available.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<PromptTemplate>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionSection>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Ids end up in file names.
fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(cfg)
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn backend(&self, id: &str) -> Option<&BackendSpec> {
        self.backends.iter().find(|b| b.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn template(&self, name: &str) -> Option<PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .cloned()
            .or_else(|| builtin(name))
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }

    pub fn filter_config(&self) -> Option<FilterConfig> {
        self.captions.as_ref().map(|c| FilterConfig {
            threshold: c.threshold,
            seed: self.seed,
        })
    }

    /// Checks cross-references and value ranges.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.concurrency == 0 {
            return Err(invalid("concurrency must be at least 1"));
        }
        if self.sampler.k_segments == 0 {
            return Err(invalid("sampler.k_segments must be at least 1"));
        }
        let mut ids = HashSet::new();
        for b in &self.backends {
            if !ids.insert(&b.id) {
                return Err(invalid(format!("backend `{}` defined twice", b.id)));
            }
            if b.max_in_flight == 0 {
                return Err(invalid(format!("backend `{}`: max_in_flight must be at least 1", b.id)));
            }
            if !(0.0..=2.0).contains(&b.temperature) {
                return Err(invalid(format!("backend `{}`: temperature out of range", b.id)));
            }
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            if !is_safe_id(&m.id) {
                return Err(invalid(format!("model id `{}` must be [A-Za-z0-9._-]+", m.id)));
            }
            if !ids.insert(&m.id) {
                return Err(invalid(format!("model `{}` defined twice", m.id)));
            }
            if self.backend(&m.backend).is_none() {
                return Err(invalid(format!("model `{}` uses unknown backend `{}`", m.id, m.backend)));
            }
            if self.template(&m.template).is_none() {
                return Err(invalid(format!("model `{}` uses unknown template `{}`", m.id, m.template)));
            }
        }
        if let Some(f) = &self.fusion {
            f.validate().map_err(|e| invalid(format!("fusion: {e}")))?;
            if let Some(m) = f.model_priority.iter().find(|m| self.model(m).is_none()) {
                return Err(invalid(format!("fusion priority names unknown model `{m}`")));
            }
        }
        if let Some(c) = &self.captions {
            if !(0.0..=1.0).contains(&c.threshold) {
                return Err(invalid(format!("captions.threshold {} is outside [0, 1]", c.threshold)));
            }
            for b in [&c.backend_a, &c.backend_b, &c.judge] {
                if self.backend(b).is_none() {
                    return Err(invalid(format!("captions use unknown backend `{b}`")));
                }
            }
            for t in [&c.caption_template, &c.judge_template] {
                if self.template(t).is_none() {
                    return Err(invalid(format!("captions use unknown template `{t}`")));
                }
            }
        }
        Ok(())
    }

    /// Instantiates every configured backend.
    pub fn build_registry(&self) -> Result<BackendRegistry, ConfigError> {
        let mut reg = BackendRegistry::new();
        for spec in &self.backends {
            let backend: Box<dyn crate::backend::Backend> = match &spec.kind {
                BackendKind::Mock { script } => {
                    let path = self.resolve(script);
                    let mock = MockBackend::load(&spec.id, &path)
                        .map_err(|e| invalid(format!("backend `{}`: {e}", spec.id)))?;
                    Box::new(mock)
                }
                BackendKind::Http { base_url, api, model, auth_env } => {
                    let auth_token = match auth_env {
                        Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingEnv(var.clone()))?),
                        None => None,
                    };
                    let settings = HttpSettings {
                        base_url: base_url.clone(),
                        api: *api,
                        model: model.clone(),
                        auth_token,
                        timeout: Duration::from_secs(spec.timeout_secs),
                    };
                    Box::new(
                        HttpBackend::new(&spec.id, settings)
                            .map_err(|e| invalid(format!("backend `{}`: {e}", spec.id)))?,
                    )
                }
            };
            reg.register(&spec.id, backend, spec.retry_policy(), spec.max_attachments, spec.max_in_flight);
        }
        Ok(reg)
    }

    /// Copy with every file reference made absolute, so the snapshot can be
    /// reloaded from any directory.
    pub fn absolutized(&self) -> std::io::Result<RunConfig> {
        let abs = |p: &Path| std::path::absolute(self.resolve(p));
        let mut cfg = self.clone();
        cfg.manifest = abs(&self.manifest)?;
        cfg.lexicon = self.lexicon.as_deref().map(abs).transpose()?;
        cfg.output_dir = abs(&self.output_dir)?;
        for b in &mut cfg.backends {
            if let BackendKind::Mock { script } = &mut b.kind {
                *script = abs(script)?;
            }
        }
        if let Some(c) = &mut cfg.captions {
            c.images = abs(&c.images)?;
        }
        cfg.base_dir = std::path::absolute(&self.base_dir)?;
        Ok(cfg)
    }

    /// Pretty JSON of the effective configuration, newline terminated.
    pub fn snapshot(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Templates by name for every model, for audit output.
    pub fn model_templates(&self) -> BTreeMap<String, PromptTemplate> {
        self.models
            .iter()
            .filter_map(|m| self.template(&m.template).map(|t| (m.id.clone(), t)))
            .collect()
    }
}
