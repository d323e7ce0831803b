//! Shared domain types: sample records, manifests and their validation.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::labelspace::{normalize_label, to_label_set, LabelSet};
use crate::seed::{stream_rng, uniform_below};

/// How frames were prepared before inference. Recorded, never acted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessTag {
    #[default]
    EntireImage,
    FaceAlignment,
}

/// One evaluation unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// A video file or a directory of already extracted frames.
    pub media_ref: PathBuf,
    pub n_frames: u64,
    /// Spoken words, substituted into the prompt. Opaque to the pipeline.
    #[serde(default)]
    pub transcript: String,
    #[serde(default)]
    pub gt_labels: Vec<String>,
    #[serde(default)]
    pub preprocess_tag: PreprocessTag,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    #[default]
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub split: SplitTag,
}

/// A single invariant violation, tied to the offending record.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestViolation {
    #[error("record #{index}: id is empty")]
    EmptyId { index: usize },
    #[error("duplicate record id `{id}`")]
    DuplicateId { id: String },
    #[error("record `{id}`: gt_labels has no usable label")]
    EmptyGroundTruth { id: String },
    #[error("record `{id}`: n_frames must be positive")]
    NonPositiveFrameCount { id: String },
}

impl ManifestViolation {
    pub fn record_id(&self) -> Option<&str> {
        match self {
            ManifestViolation::EmptyId { .. } => None,
            ManifestViolation::DuplicateId { id }
            | ManifestViolation::EmptyGroundTruth { id }
            | ManifestViolation::NonPositiveFrameCount { id } => Some(id),
        }
    }

    pub fn field(&self) -> &'static str {
        match self {
            ManifestViolation::EmptyId { .. } | ManifestViolation::DuplicateId { .. } => "id",
            ManifestViolation::EmptyGroundTruth { .. } => "gt_labels",
            ManifestViolation::NonPositiveFrameCount { .. } => "n_frames",
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("manifest has {} violation(s): {}", .0.len(), summarize(.0))]
    Invalid(Vec<ManifestViolation>),
}

fn summarize(violations: &[ManifestViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every record invariant and reports all violations at once.
///
/// A valid manifest is returned unchanged, so validation is idempotent.
pub fn validate_manifest(manifest: DatasetManifest) -> Result<DatasetManifest, Vec<ManifestViolation>> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for (index, rec) in manifest.records.iter().enumerate() {
        if rec.id.is_empty() {
            violations.push(ManifestViolation::EmptyId { index });
        } else if !seen.insert(rec.id.as_str()) {
            violations.push(ManifestViolation::DuplicateId { id: rec.id.clone() });
        }
        if rec.n_frames == 0 {
            violations.push(ManifestViolation::NonPositiveFrameCount { id: rec.id.clone() });
        }
        if !rec.gt_labels.iter().any(|l| normalize_label(l).is_ok()) {
            violations.push(ManifestViolation::EmptyGroundTruth { id: rec.id.clone() });
        }
    }
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(violations)
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, split: SplitTag) -> Self {
        Self { records, split }
    }

    /// Reads a JSON-lines manifest without validating it.
    pub fn read(path: &Path, split: SplitTag) -> Result<Self, JsonlError> {
        Ok(Self::new(jsonl::read(path)?, split))
    }

    /// Reads and validates.
    pub fn load(path: &Path, split: SplitTag) -> Result<Self, ManifestError> {
        validate_manifest(Self::read(path, split)?).map_err(ManifestError::Invalid)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        jsonl::write(path, &self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

/// Record counts per split, as reported alongside a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub test: usize,
}

impl SplitSummary {
    pub fn of(manifests: &[&DatasetManifest]) -> Self {
        let mut s = SplitSummary::default();
        for m in manifests {
            match m.split {
                SplitTag::Train => s.train += m.len(),
                SplitTag::Test => s.test += m.len(),
            }
        }
        s
    }

    pub fn total(&self) -> usize {
        self.train + self.test
    }
}

/// Randomly holds out `test_count` records as a test split.
///
/// Both halves keep the original record order. The choice depends only on
/// `seed` and the record count.
pub fn split_train_test(
    records: Vec<SampleRecord>,
    test_count: usize,
    seed: u64,
) -> (DatasetManifest, DatasetManifest) {
    let n = records.len();
    let test_count = test_count.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0);
    // Partial Fisher-Yates: the first `test_count` slots become the test set.
    for i in 0..test_count {
        let j = i + uniform_below(&mut rng, (n - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut is_test = vec![false; n];
    for &i in &order[..test_count] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = records
        .into_iter()
        .zip(is_test)
        .partition(|(_, t)| *t);
    (
        DatasetManifest::new(train.into_iter().map(|(r, _)| r).collect(), SplitTag::Train),
        DatasetManifest::new(test.into_iter().map(|(r, _)| r).collect(), SplitTag::Test),
    )
}

/// Why a prediction carries no labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyReason {
    NoLabelBlock,
    EmptyLabelSet,
    Timeout,
    Transport,
    BackendError,
    AttachmentTooLarge,
    AttachmentUnreadable,
    /// Vote fusion where no group reached the vote threshold, or a union of
    /// empty predictions.
    NoConsensus,
    /// The sample had no prediction at all.
    Missing,
}

/// Labels predicted for one sample, or the recorded reason there are none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictedLabels {
    Labels(LabelSet),
    Empty(EmptyReason),
}

impl PredictedLabels {
    pub fn label_set(&self) -> Option<&LabelSet> {
        match self {
            PredictedLabels::Labels(l) => Some(l),
            PredictedLabels::Empty(_) => None,
        }
    }

    pub fn empty_reason(&self) -> Option<EmptyReason> {
        match self {
            PredictedLabels::Labels(_) => None,
            PredictedLabels::Empty(r) => Some(*r),
        }
    }
}

/// One model's prediction for one sample; a line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "PredictionLine", try_from = "PredictionLine")]
pub struct PredictionRecord {
    pub sample_id: String,
    pub model_id: String,
    pub raw_text: Option<String>,
    pub labels: PredictedLabels,
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    sample_id: String,
    model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_text: Option<String>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empty_reason: Option<EmptyReason>,
}

impl From<PredictionRecord> for PredictionLine {
    fn from(p: PredictionRecord) -> Self {
        let (labels, empty_reason) = match p.labels {
            PredictedLabels::Labels(l) => (l.labels().to_vec(), None),
            PredictedLabels::Empty(r) => (Vec::new(), Some(r)),
        };
        Self {
            sample_id: p.sample_id,
            model_id: p.model_id,
            raw_text: p.raw_text,
            labels,
            empty_reason,
        }
    }
}

impl TryFrom<PredictionLine> for PredictionRecord {
    type Error = String;

    fn try_from(line: PredictionLine) -> Result<Self, Self::Error> {
        let labels = match (line.empty_reason, to_label_set(&line.labels)) {
            (None, Ok((set, _))) => PredictedLabels::Labels(set),
            (Some(r), _) if line.labels.is_empty() => PredictedLabels::Empty(r),
            (None, Err(_)) => PredictedLabels::Empty(EmptyReason::EmptyLabelSet),
            (Some(_), _) => {
                return Err(format!(
                    "prediction `{}`/`{}` has both labels and an empty_reason",
                    line.sample_id, line.model_id
                ))
            }
        };
        Ok(Self {
            sample_id: line.sample_id,
            model_id: line.model_id,
            raw_text: line.raw_text,
            labels,
        })
    }
}
