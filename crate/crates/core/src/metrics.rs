//! Open-vocabulary set metrics.
//!
//! Predictions and ground truth are compared as sets of synonym groups.
//! Accuracy is the share of predicted groups that hit the ground truth
//! (set precision), recall the share of ground-truth groups that were
//! predicted, and avg their arithmetic mean. Reports macro-average the
//! per-sample values.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{to_group_set, LabelSet, SynonymLexicon};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("ground truth for `{0}` is empty")]
    EmptyGroundTruth(String),
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("cannot aggregate zero samples")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub avg: f64,
}

impl SampleMetrics {
    pub const ZERO: SampleMetrics = SampleMetrics {
        accuracy: 0.0,
        recall: 0.0,
        avg: 0.0,
    };
}

fn check_unit(name: &'static str, value: f64) -> Result<f64, MetricsError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(MetricsError::OutOfRange { name, value })
    }
}

/// The challenge score: mean of accuracy and recall.
pub fn combine_avg(accuracy: f64, recall: f64) -> Result<f64, MetricsError> {
    let accuracy = check_unit("accuracy", accuracy)?;
    let recall = check_unit("recall", recall)?;
    Ok((accuracy + recall) / 2.0)
}

/// Scores one sample. `None` stands for an empty prediction, which scores
/// zero on both axes.
pub fn ov_sample_metrics(
    pred: Option<&LabelSet>,
    gt: &LabelSet,
    lexicon: &SynonymLexicon,
) -> SampleMetrics {
    let Some(pred) = pred else {
        return SampleMetrics::ZERO;
    };
    let p = to_group_set(pred, lexicon);
    let g = to_group_set(gt, lexicon);
    let hits = p.iter().filter(|grp| g.contains(grp)).count() as f64;
    let accuracy = hits / p.len() as f64;
    let recall = hits / g.len() as f64;
    SampleMetrics {
        accuracy,
        recall,
        avg: (accuracy + recall) / 2.0,
    }
}

/// Like [`ov_sample_metrics`] but starting from raw ground-truth strings.
pub fn score_raw_gt(
    sample_id: &str,
    pred: Option<&LabelSet>,
    gt_raw: &[String],
    lexicon: &SynonymLexicon,
) -> Result<SampleMetrics, MetricsError> {
    let (gt, _) = crate::labelspace::to_label_set(gt_raw)
        .map_err(|_| MetricsError::EmptyGroundTruth(sample_id.to_string()))?;
    Ok(ov_sample_metrics(pred, &gt, lexicon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    #[serde(flatten)]
    pub metrics: SampleMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub n_samples: usize,
    pub macro_avg: f64,
    pub macro_accuracy: f64,
    pub macro_recall: f64,
    pub per_sample: Vec<SampleScore>,
}

/// Macro means over samples, summed in input order.
pub fn aggregate(name: &str, per_sample: Vec<SampleScore>) -> Result<MetricReport, MetricsError> {
    if per_sample.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
    Ok(MetricReport {
        name: name.to_string(),
        n_samples: per_sample.len(),
        macro_avg: mean(|m| m.avg),
        macro_accuracy: mean(|m| m.accuracy),
        macro_recall: mean(|m| m.recall),
        per_sample,
    })
}

/// Fixed-width table with four decimals, one row per report.
pub fn render_table(reports: &[&MetricReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.name.chars().count())
        .max()
        .unwrap_or(0)
        .max("model".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>8}  {:>8}  {:>6}", "model", "avg", "accuracy", "recall", "n");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>8.4}  {:>8.4}  {:>6}",
            r.name, r.macro_avg, r.macro_accuracy, r.macro_recall, r.n_samples
        );
    }
    out
}
