//! Caption-pair data factory.
//!
//! Two captioning backends describe each image with the same prompt, a
//! judge backend scores how similar the two descriptions are, pairs under
//! the threshold are dropped and one caption of every surviving pair is
//! kept by a seeded coin flip.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    parse_score, Attachment, BackendError, BackendRegistry, GenerationControls, InferenceRequest,
    PromptTemplate,
};
use crate::parallel::ordered_map;
use crate::seed::{derive_seed, stream_rng};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub image_ref: PathBuf,
    pub caption_a: String,
    pub caption_b: String,
    pub source_a: String,
    pub source_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnusableReason {
    TimeoutSideA,
    TimeoutSideB,
    BackendErrorSideA,
    BackendErrorSideB,
    EmptyCaptionSideA,
    EmptyCaptionSideB,
    JudgeTimeout,
    JudgeError,
    NoScoreFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    BelowThreshold,
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum FilterDecision {
    Keep { caption: String, source: String },
    Drop { reason: DropReason },
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("backend `{0}` is not registered")]
    UnknownBackend(String),
    #[error("image {0} does not exist")]
    MissingImage(PathBuf),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("template `{template}` is unusable: {message}")]
    Template { template: String, message: String },
    #[error("writing caption output: {0}")]
    Io(#[from] std::io::Error),
}

fn side_failure(e: &BackendError, side_a: bool) -> UnusableReason {
    match (e, side_a) {
        (BackendError::Timeout { .. }, true) => UnusableReason::TimeoutSideA,
        (BackendError::Timeout { .. }, false) => UnusableReason::TimeoutSideB,
        (_, true) => UnusableReason::BackendErrorSideA,
        (_, false) => UnusableReason::BackendErrorSideB,
    }
}

fn image_attachment(image_ref: &Path) -> Attachment {
    Attachment {
        name: image_ref
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| image_ref.display().to_string()),
        path: image_ref.to_path_buf(),
    }
}

/// Captions one image with both backends using the same rendered prompt.
pub fn generate_caption_pair(
    registry: &BackendRegistry,
    image_ref: &Path,
    backend_a: &str,
    backend_b: &str,
    template: &PromptTemplate,
    controls: GenerationControls,
) -> Result<CaptionPair, UnusableReason> {
    let prompt = template
        .render(&BTreeMap::new())
        .map_err(|_| UnusableReason::BackendErrorSideA)?;
    let caption = |backend: &str, side_a: bool| {
        let request = InferenceRequest {
            backend_id: backend.to_string(),
            prompt: prompt.clone(),
            attachments: vec![image_attachment(image_ref)],
            controls,
        };
        let text = registry
            .complete(&request)
            .map_err(|e| side_failure(&e, side_a))?
            .text;
        let text = text.trim().to_string();
        if text.is_empty() {
            Err(if side_a {
                UnusableReason::EmptyCaptionSideA
            } else {
                UnusableReason::EmptyCaptionSideB
            })
        } else {
            Ok(text)
        }
    };
    let caption_a = caption(backend_a, true)?;
    let caption_b = caption(backend_b, false)?;
    Ok(CaptionPair {
        image_ref: image_ref.to_path_buf(),
        caption_a,
        caption_b,
        source_a: backend_a.to_string(),
        source_b: backend_b.to_string(),
        score: None,
    })
}

/// Asks the judge backend for a similarity score and stores it on the pair.
pub fn score_pair(
    registry: &BackendRegistry,
    mut pair: CaptionPair,
    judge_backend: &str,
    judge_template: &PromptTemplate,
    controls: GenerationControls,
) -> Result<CaptionPair, UnusableReason> {
    let bindings = BTreeMap::from([
        ("caption_a".to_string(), pair.caption_a.clone()),
        ("caption_b".to_string(), pair.caption_b.clone()),
    ]);
    let prompt = judge_template
        .render(&bindings)
        .map_err(|_| UnusableReason::JudgeError)?;
    let request = InferenceRequest {
        backend_id: judge_backend.to_string(),
        prompt,
        attachments: Vec::new(),
        controls,
    };
    let response = registry.complete(&request).map_err(|e| match e {
        BackendError::Timeout { .. } => UnusableReason::JudgeTimeout,
        _ => UnusableReason::JudgeError,
    })?;
    pair.score = Some(parse_score(&response.text).map_err(|_| UnusableReason::NoScoreFound)?);
    Ok(pair)
}

/// Keeps pairs scoring at least the threshold; picks one caption by a fair
/// coin seeded from `(config.seed, image_ref)`.
pub fn filter_pair(pair: &CaptionPair, config: &FilterConfig) -> FilterDecision {
    let Some(score) = pair.score else {
        return FilterDecision::Drop {
            reason: DropReason::Unscored,
        };
    };
    if score < config.threshold {
        return FilterDecision::Drop {
            reason: DropReason::BelowThreshold,
        };
    }
    let key = pair.image_ref.to_string_lossy();
    let coin = stream_rng(derive_seed(config.seed, &key), 0).next_u64() & 1;
    let (caption, source) = if coin == 0 {
        (&pair.caption_a, &pair.source_a)
    } else {
        (&pair.caption_b, &pair.source_b)
    };
    FilterDecision::Keep {
        caption: caption.clone(),
        source: source.clone(),
    }
}

/// One line of the image manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image: PathBuf,
}

/// One line of the produced dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image: PathBuf,
    pub caption: String,
    pub source: String,
    pub score: f64,
}

/// Audit line for every attempted image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PairOutcome {
    Kept {
        pair: CaptionPair,
        caption: String,
        source: String,
    },
    Dropped {
        pair: CaptionPair,
        reason: DropReason,
    },
    Unusable {
        image: PathBuf,
        reason: UnusableReason,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub attempted: usize,
    /// Pairs where both captions were produced.
    pub generated: usize,
    pub unusable: usize,
    pub dropped_below_threshold: usize,
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct CaptionJob {
    pub backend_a: String,
    pub backend_b: String,
    pub judge: String,
    pub caption_template: PromptTemplate,
    pub judge_template: PromptTemplate,
    pub controls: GenerationControls,
    pub filter: FilterConfig,
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRun {
    pub records: Vec<CaptionRecord>,
    pub outcomes: Vec<PairOutcome>,
    pub stats: CaptionStats,
}

impl CaptionJob {
    fn validate(&self, registry: &BackendRegistry, images: &[PathBuf]) -> Result<(), CaptionError> {
        for b in [&self.backend_a, &self.backend_b, &self.judge] {
            if !registry.contains(b) {
                return Err(CaptionError::UnknownBackend(b.clone()));
            }
        }
        if !(0.0..=1.0).contains(&self.filter.threshold) {
            return Err(CaptionError::InvalidThreshold(self.filter.threshold));
        }
        if let Some(p) = self.caption_template.placeholders().first() {
            return Err(CaptionError::Template {
                template: self.caption_template.name.clone(),
                message: format!("unexpected placeholder `{p}`"),
            });
        }
        let judge_slots = self.judge_template.placeholders();
        for needed in ["caption_a", "caption_b"] {
            if !judge_slots.contains(&needed) {
                return Err(CaptionError::Template {
                    template: self.judge_template.name.clone(),
                    message: format!("missing placeholder `{needed}`"),
                });
            }
        }
        if let Some(missing) = images.iter().find(|p| !p.exists()) {
            return Err(CaptionError::MissingImage(missing.clone()));
        }
        Ok(())
    }

    fn process(&self, registry: &BackendRegistry, image: &Path) -> PairOutcome {
        let unusable = |reason| PairOutcome::Unusable {
            image: image.to_path_buf(),
            reason,
        };
        let pair = match generate_caption_pair(
            registry,
            image,
            &self.backend_a,
            &self.backend_b,
            &self.caption_template,
            self.controls,
        ) {
            Ok(p) => p,
            Err(reason) => return unusable(reason),
        };
        let pair = match score_pair(registry, pair, &self.judge, &self.judge_template, self.controls) {
            Ok(p) => p,
            Err(reason) => return unusable(reason),
        };
        match filter_pair(&pair, &self.filter) {
            FilterDecision::Keep { caption, source } => PairOutcome::Kept { pair, caption, source },
            FilterDecision::Drop { reason } => PairOutcome::Dropped { pair, reason },
        }
    }
}

/// Runs the whole factory over `images`. Per-image failures are recorded;
/// only configuration problems abort.
pub fn build_caption_dataset(
    images: &[PathBuf],
    job: &CaptionJob,
    registry: &BackendRegistry,
) -> Result<CaptionRun, CaptionError> {
    job.validate(registry, images)?;
    let outcomes = ordered_map(images, job.concurrency, |img| job.process(registry, img));

    let mut stats = CaptionStats {
        attempted: images.len(),
        ..CaptionStats::default()
    };
    let mut records = Vec::new();
    for o in &outcomes {
        match o {
            PairOutcome::Kept { pair, caption, source } => {
                stats.generated += 1;
                stats.kept += 1;
                records.push(CaptionRecord {
                    image: pair.image_ref.clone(),
                    caption: caption.clone(),
                    source: source.clone(),
                    score: pair.score.unwrap_or_default(),
                });
            }
            PairOutcome::Dropped { .. } => {
                stats.generated += 1;
                stats.dropped_below_threshold += 1;
            }
            PairOutcome::Unusable { reason, .. } => {
                stats.unusable += 1;
                if matches!(
                    reason,
                    UnusableReason::JudgeTimeout | UnusableReason::JudgeError | UnusableReason::NoScoreFound
                ) {
                    stats.generated += 1;
                }
            }
        }
    }
    Ok(CaptionRun {
        records,
        outcomes,
        stats,
    })
}

impl CaptionRun {
    /// Writes `dataset.jsonl`, `pairs.jsonl` and `stats.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CaptionError> {
        fs::create_dir_all(dir)?;
        crate::jsonl::write(&dir.join("dataset.jsonl"), &self.records)?;
        crate::jsonl::write(&dir.join("pairs.jsonl"), &self.outcomes)?;
        let mut stats = serde_json::to_string_pretty(&self.stats).expect("plain struct");
        stats.push('\n');
        fs::write(dir.join("stats.json"), stats)?;
        Ok(())
    }
}
