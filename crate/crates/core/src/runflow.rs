//! End-to-end evaluation runs.
//!
//! Output layout under the configured output directory:
//!
//! ```text
//! predictions/<model>.jsonl     one prediction per manifest sample
//! fused/<strategy>.jsonl        fused predictions
//! reports/<name>.json           metric reports
//! audit/<sample_id>/            frames.json, <model>.prompt.txt,
//!                               <model>.response.txt, <model>.meta.json
//! run_record.jsonl              everything above joined per sample
//! ```
//!
//! Samples are processed concurrently but every file is written in
//! manifest order, so the tree is byte-identical for a fixed config and
//! scripted backends regardless of the concurrency cap.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Attachment, BackendError, BackendRegistry, InferenceRequest};
use crate::config::{ConfigError, RunConfig};
use crate::fusion::{fuse_sample, FusionConfig, FusionError};
use crate::jsonl::{self, JsonlError};
use crate::labelspace::{parse_response, LabelError, LexiconError, SynonymLexicon};
use crate::metrics::{aggregate, score_raw_gt, MetricReport, MetricsError, SampleMetrics, SampleScore};
use crate::model::{
    DatasetManifest, EmptyReason, ManifestError, PredictedLabels, PredictionRecord, SampleRecord,
};
use crate::parallel::ordered_map;
use crate::sampler::{sample_frames, SamplerConfig};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("prediction `{sample_id}` from `{model_id}` is not in the manifest")]
    UnknownSampleId { sample_id: String, model_id: String },
    #[error("sample `{sample_id}` has two predictions from `{model_id}`")]
    DuplicatePrediction { sample_id: String, model_id: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("predictions for `{model}` not found at {path}")]
    MissingPredictions { model: String, path: PathBuf },
    #[error("no fusion configured")]
    NoFusion,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    /// True when the failure comes from configuration or input files
    /// rather than from running the pipeline.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            RunError::Config(_)
                | RunError::Manifest(_)
                | RunError::Lexicon(_)
                | RunError::UnknownModel(_)
                | RunError::NoFusion
                | RunError::MissingPredictions { .. }
        )
    }
}

/// A loaded, validated run: config plus the resources it references.
pub struct Run {
    pub config: RunConfig,
    pub manifest: DatasetManifest,
    pub lexicon: SynonymLexicon,
    pub registry: BackendRegistry,
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let manifest = DatasetManifest::load(&config.resolve(&config.manifest), config.manifest_split)?;
        let lexicon = match &config.lexicon {
            Some(p) => SynonymLexicon::load(&config.resolve(p))?,
            None => SynonymLexicon::empty(),
        };
        let registry = config.build_registry()?;
        Ok(Self {
            config,
            manifest,
            lexicon,
            registry,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.config.output_dir()
    }

    fn manifest_dir(&self) -> PathBuf {
        self.config
            .resolve(&self.config.manifest)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }

    pub fn predictions_path(&self, model: &str) -> PathBuf {
        self.output_dir().join("predictions").join(format!("{model}.jsonl"))
    }

    pub fn fused_path(&self, fusion: &FusionConfig) -> PathBuf {
        self.output_dir().join("fused").join(format!("{}.jsonl", fusion.strategy))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.output_dir().join("reports").join(format!("{name}.json"))
    }

    /// Sampler settings for one sample: the global seed keyed by sample id.
    pub fn sampler_for(&self, sample_id: &str) -> SamplerConfig {
        SamplerConfig {
            k_segments: self.config.sampler.k_segments,
            seed: derive_seed(self.config.seed, sample_id),
        }
    }
}

/// Frame indices chosen for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSelection {
    pub sample_id: String,
    pub n_frames: u64,
    pub frames: Vec<u64>,
}

pub fn select_frames(run: &Run) -> Vec<FrameSelection> {
    run.manifest
        .records
        .iter()
        .map(|r| FrameSelection {
            sample_id: r.id.clone(),
            n_frames: r.n_frames,
            frames: sample_frames(r.n_frames, &run.sampler_for(&r.id)),
        })
        .collect()
}

/// Maps frame indices to attachments. A directory media ref lists its
/// files sorted by name; anything else is treated as a video and gets
/// synthetic `<file>#frame=<i>` references.
fn frame_attachments(media: &Path, frames: &[u64]) -> Vec<Attachment> {
    if media.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(media)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect())
            .unwrap_or_default();
        files.sort();
        frames
            .iter()
            .map(|&i| match files.get(i as usize) {
                Some(p) => Attachment {
                    name: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                    path: p.clone(),
                },
                None => Attachment {
                    name: format!("frame_{i:06}"),
                    path: media.join(format!("frame_{i:06}")),
                },
            })
            .collect()
    } else {
        let stem = media
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        frames
            .iter()
            .map(|&i| Attachment {
                name: format!("{stem}#frame={i}"),
                path: media.to_path_buf(),
            })
            .collect()
    }
}

fn empty_reason_for(e: &BackendError) -> EmptyReason {
    match e {
        BackendError::Timeout { .. } => EmptyReason::Timeout,
        BackendError::Transport { .. } => EmptyReason::Transport,
        BackendError::Backend { .. } => EmptyReason::BackendError,
        BackendError::AttachmentTooLarge { .. } => EmptyReason::AttachmentTooLarge,
        BackendError::Attachment { .. } => EmptyReason::AttachmentUnreadable,
    }
}

/// Request metadata persisted next to each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub model_id: String,
    pub backend_id: String,
    pub template: String,
    pub attachments: Vec<String>,
    pub max_tokens: u32,
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_reason: Option<EmptyReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One model's work on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInference {
    pub sample_id: String,
    pub frames: Vec<u64>,
    pub prompt: String,
    pub response: Option<String>,
    pub meta: RequestMeta,
    pub prediction: PredictionRecord,
}

fn infer_sample(run: &Run, model_id: &str, record: &SampleRecord) -> Result<SampleInference, RunError> {
    let model = run
        .config
        .model(model_id)
        .ok_or_else(|| RunError::UnknownModel(model_id.to_string()))?;
    let backend = run
        .config
        .backend(&model.backend)
        .ok_or_else(|| RunError::UnknownModel(model_id.to_string()))?;
    let template = run
        .config
        .template(&model.template)
        .ok_or_else(|| RunError::UnknownModel(model_id.to_string()))?;

    let frames = sample_frames(record.n_frames, &run.sampler_for(&record.id));
    let media = if record.media_ref.is_absolute() {
        record.media_ref.clone()
    } else {
        run.manifest_dir().join(&record.media_ref)
    };
    let attachments = frame_attachments(&media, &frames);
    let bindings = BTreeMap::from([
        ("text".to_string(), record.transcript.clone()),
        ("subtitle".to_string(), record.transcript.clone()),
    ]);
    let prompt = template
        .render(&bindings)
        .map_err(|e| ConfigError::Invalid(format!("template `{}`: {e}", template.name)))?;
    let controls = backend.controls();
    let mut meta = RequestMeta {
        model_id: model_id.to_string(),
        backend_id: backend.id.clone(),
        template: template.name.clone(),
        attachments: attachments.iter().map(|a| a.name.clone()).collect(),
        max_tokens: controls.max_tokens,
        temperature: controls.temperature,
        empty_reason: None,
        error: None,
    };
    let request = InferenceRequest {
        backend_id: backend.id.clone(),
        prompt: prompt.clone(),
        attachments,
        controls,
    };

    let (response, labels) = match run.registry.complete(&request) {
        Ok(resp) => {
            let labels = match parse_response(&resp.text) {
                Ok(set) => PredictedLabels::Labels(set),
                Err(LabelError::NoLabelBlock) => PredictedLabels::Empty(EmptyReason::NoLabelBlock),
                Err(_) => PredictedLabels::Empty(EmptyReason::EmptyLabelSet),
            };
            (Some(resp.text), labels)
        }
        Err(e) => {
            log::warn!("{model_id}/{}: {e}", record.id);
            meta.error = Some(e.to_string());
            (None, PredictedLabels::Empty(empty_reason_for(&e)))
        }
    };
    meta.empty_reason = labels.empty_reason();
    Ok(SampleInference {
        sample_id: record.id.clone(),
        frames,
        prompt,
        response: response.clone(),
        meta,
        prediction: PredictionRecord {
            sample_id: record.id.clone(),
            model_id: model_id.to_string(),
            raw_text: response,
            labels,
        },
    })
}

fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

/// Queries each model on every sample and writes prediction and audit files.
///
/// Per-sample failures become empty predictions with a reason; only
/// configuration problems abort.
pub fn run_inference(run: &Run, model_ids: &[String]) -> Result<BTreeMap<String, Vec<SampleInference>>, RunError> {
    for m in model_ids {
        if run.config.model(m).is_none() {
            return Err(RunError::UnknownModel(m.clone()));
        }
    }
    let out = run.output_dir();
    let audit = out.join("audit");
    for sel in select_frames(run) {
        write_json(&audit.join(&sel.sample_id).join("frames.json"), &sel)?;
    }

    let mut all = BTreeMap::new();
    for model_id in model_ids {
        let results = ordered_map(&run.manifest.records, run.config.concurrency, |rec| {
            infer_sample(run, model_id, rec)
        });
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        for r in &results {
            let dir = audit.join(&r.sample_id);
            write_text(&dir.join(format!("{model_id}.prompt.txt")), &r.prompt)?;
            if let Some(text) = &r.response {
                write_text(&dir.join(format!("{model_id}.response.txt")), text)?;
            }
            write_json(&dir.join(format!("{model_id}.meta.json")), &r.meta)?;
        }
        let preds: Vec<_> = results.iter().map(|r| r.prediction.clone()).collect();
        jsonl::write(&run.predictions_path(model_id), &preds)?;
        log::info!("{model_id}: {} predictions", preds.len());
        all.insert(model_id.clone(), results);
    }
    Ok(all)
}

/// Indexes predictions by sample, rejecting unknown ids and duplicates.
fn index_predictions<'a>(
    predictions: &'a [PredictionRecord],
    manifest: &DatasetManifest,
) -> Result<HashMap<&'a str, &'a PredictionRecord>, RunError> {
    let known: HashSet<&str> = manifest.ids().collect();
    let mut by_id = HashMap::new();
    for p in predictions {
        if !known.contains(p.sample_id.as_str()) {
            return Err(RunError::UnknownSampleId {
                sample_id: p.sample_id.clone(),
                model_id: p.model_id.clone(),
            });
        }
        if by_id.insert(p.sample_id.as_str(), p).is_some() {
            return Err(RunError::DuplicatePrediction {
                sample_id: p.sample_id.clone(),
                model_id: p.model_id.clone(),
            });
        }
    }
    Ok(by_id)
}

/// Scores predictions against the manifest. Samples without a prediction
/// score as empty predictions.
pub fn run_eval(
    name: &str,
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
    lexicon: &SynonymLexicon,
) -> Result<MetricReport, RunError> {
    let by_id = index_predictions(predictions, manifest)?;
    let scores = manifest
        .records
        .iter()
        .map(|rec| {
            let pred = by_id.get(rec.id.as_str()).and_then(|p| p.labels.label_set());
            Ok(SampleScore {
                sample_id: rec.id.clone(),
                metrics: score_raw_gt(&rec.id, pred, &rec.gt_labels, lexicon)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(aggregate(name, scores)?)
}

pub fn load_predictions(run: &Run, model: &str) -> Result<Vec<PredictionRecord>, RunError> {
    let path = run.predictions_path(model);
    if !path.exists() {
        return Err(RunError::MissingPredictions {
            model: model.to_string(),
            path,
        });
    }
    Ok(jsonl::read(&path)?)
}

/// Evaluates stored predictions of each model and writes `reports/<model>.json`.
pub fn evaluate_models(run: &Run, model_ids: &[String]) -> Result<Vec<MetricReport>, RunError> {
    model_ids
        .iter()
        .map(|m| {
            let preds = load_predictions(run, m)?;
            let report = run_eval(m, &preds, &run.manifest, &run.lexicon)?;
            write_json(&run.report_path(m), &report)?;
            Ok(report)
        })
        .collect()
}

/// Fused report with the constituent reports alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub strategy: String,
    pub min_votes: usize,
    pub fused: MetricReport,
    pub constituents: Vec<MetricReport>,
}

/// Fuses per-sample predictions of the configured models in manifest order.
pub fn fuse_predictions(
    manifest: &DatasetManifest,
    per_model: &[Vec<PredictionRecord>],
    lexicon: &SynonymLexicon,
    fusion: &FusionConfig,
) -> Result<Vec<PredictionRecord>, RunError> {
    let mut by_sample: HashMap<&str, Vec<PredictionRecord>> = HashMap::new();
    for preds in per_model {
        index_predictions(preds, manifest)?;
        for p in preds {
            by_sample.entry(p.sample_id.as_str()).or_default().push(p.clone());
        }
    }
    manifest
        .records
        .iter()
        .map(|rec| {
            let preds = by_sample.remove(rec.id.as_str()).unwrap_or_default();
            Ok(fuse_sample(&rec.id, &preds, lexicon, fusion)?)
        })
        .collect()
}

/// Fuses stored predictions, evaluates fused and constituent models and
/// writes `fused/<strategy>.jsonl` plus `reports/fused_<strategy>.json`.
pub fn run_fuse_eval(run: &Run, fusion: &FusionConfig) -> Result<FusionReport, RunError> {
    fusion.validate()?;
    let per_model = fusion
        .model_priority
        .iter()
        .map(|m| {
            if run.config.model(m).is_none() {
                return Err(RunError::UnknownModel(m.clone()));
            }
            load_predictions(run, m)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse_predictions(&run.manifest, &per_model, &run.lexicon, fusion)?;
    jsonl::write(&run.fused_path(fusion), &fused)?;

    let fused_report = run_eval(&fusion.fused_model_id(), &fused, &run.manifest, &run.lexicon)?;
    let constituents = fusion
        .model_priority
        .iter()
        .zip(&per_model)
        .map(|(m, preds)| run_eval(m, preds, &run.manifest, &run.lexicon))
        .collect::<Result<Vec<_>, _>>()?;
    let report = FusionReport {
        strategy: fusion.strategy.to_string(),
        min_votes: fusion.min_votes,
        fused: fused_report,
        constituents,
    };
    write_json(&run.report_path(&format!("fused_{}", fusion.strategy)), &report)?;
    Ok(report)
}

/// Everything known about one sample after a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sample_id: String,
    pub frames: Vec<u64>,
    pub models: Vec<ModelOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<ModelOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_reason: Option<EmptyReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: SampleMetrics,
}

fn outcome(pred: &PredictionRecord, prompt: Option<String>, error: Option<String>, metrics: SampleMetrics) -> ModelOutcome {
    ModelOutcome {
        model_id: pred.model_id.clone(),
        prompt,
        raw_text: pred.raw_text.clone(),
        labels: pred.labels.label_set().map(|s| s.labels().to_vec()).unwrap_or_default(),
        empty_reason: pred.labels.empty_reason(),
        error,
        metrics,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub reports: Vec<MetricReport>,
    pub fusion: Option<FusionReport>,
    pub records: Vec<RunRecord>,
}

/// sample -> infer -> fuse (when configured) -> eval, persisting everything.
pub fn run_all(run: &Run) -> Result<RunSummary, RunError> {
    let models = run.config.model_ids();
    let inferred = run_inference(run, &models)?;
    let reports = evaluate_models(run, &models)?;
    let fusion = match &run.config.fusion {
        Some(f) => Some(run_fuse_eval(run, f)?),
        None => None,
    };

    let fused_preds: Option<Vec<PredictionRecord>> = match &run.config.fusion {
        Some(f) => Some(jsonl::read(&run.fused_path(f))?),
        None => None,
    };
    let records = run
        .manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let models = models
                .iter()
                .zip(&reports)
                .map(|(m, report)| {
                    let inf = &inferred[m][i];
                    outcome(&inf.prediction, Some(inf.prompt.clone()), inf.meta.error.clone(), report.per_sample[i].metrics)
                })
                .collect();
            let fused = fused_preds.as_ref().zip(fusion.as_ref()).map(|(preds, fr)| {
                outcome(&preds[i], None, None, fr.fused.per_sample[i].metrics)
            });
            RunRecord {
                sample_id: rec.id.clone(),
                frames: inferred.values().next().map(|v| v[i].frames.clone()).unwrap_or_default(),
                models,
                fused,
            }
        })
        .collect::<Vec<_>>();
    jsonl::write(&run.output_dir().join("run_record.jsonl"), &records)?;
    Ok(RunSummary {
        reports,
        fusion,
        records,
    })
}

/// Reads every `reports/*.json` under the output directory, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<MetricReport>, RunError> {
    let reports_dir = dir.join("reports");
    let mut paths: Vec<PathBuf> = fs::read_dir(&reports_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        if let Ok(r) = serde_json::from_str::<MetricReport>(&text) {
            out.push(r);
        } else if let Ok(f) = serde_json::from_str::<FusionReport>(&text) {
            out.push(f.fused);
        } else {
            log::warn!("skipping unrecognised report {}", p.display());
        }
    }
    Ok(out)
}
