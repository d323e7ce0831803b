//! Shared test helpers, including a brute-force scoring oracle that works
//! from the raw fixture files with its own parsing and normalization.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use ovemo_core::config::RunConfig;

/// (accuracy, recall, avg)
pub type Scores = (f64, f64, f64);

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy")
}

/// The toy config with its output redirected to `out`.
pub fn toy_config(out: &Path, concurrency: usize) -> RunConfig {
    let mut cfg = RunConfig::load(&fixture_dir().join("config.json")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.concurrency = concurrency;
    cfg
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Lowercase, strip non-alphanumerics at both ends, squeeze spaces.
fn oracle_normalize(raw: &str) -> Option<String> {
    let lower = raw.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut start = 0;
    while start < chars.len() && !chars[start].is_alphanumeric() {
        start += 1;
    }
    let mut end = chars.len();
    while end > start && !chars[end - 1].is_alphanumeric() {
        end -= 1;
    }
    let words: Vec<String> = chars[start..end]
        .iter()
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect();
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// Label block parsing written independently: scan backwards for `]`,
/// then for the `[` before it.
pub fn oracle_labels_from_text(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let Some(close) = chars.iter().rposition(|&c| c == ']' || c == '］') else {
        return vec![];
    };
    let Some(open) = chars[..close].iter().rposition(|&c| c == '[' || c == '［') else {
        return vec![];
    };
    let inner: String = chars[open + 1..close].iter().collect();
    let mut items = vec![String::new()];
    for c in inner.chars() {
        if c == ',' || c == '，' || c == '、' {
            items.push(String::new());
        } else {
            items.last_mut().unwrap().push(c);
        }
    }
    items.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

pub struct Oracle {
    /// normalized label -> group key
    group_of: BTreeMap<String, String>,
}

impl Oracle {
    pub fn from_lexicon(path: &Path) -> Self {
        let mut group_of = BTreeMap::new();
        for entry in read_lines(path) {
            let g = entry["group"].as_str().unwrap();
            for m in entry["members"].as_array().unwrap() {
                if let Some(n) = oracle_normalize(m.as_str().unwrap()) {
                    group_of.insert(n, format!("group:{g}"));
                }
            }
        }
        Self { group_of }
    }

    fn groups(&self, raw: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in raw {
            if let Some(n) = oracle_normalize(r) {
                let key = self.group_of.get(&n).cloned().unwrap_or(format!("label:{n}"));
                if !out.contains(&key) {
                    out.push(key);
                }
            }
        }
        out
    }

    /// (accuracy, recall, avg) by exhaustive membership tests.
    pub fn score(&self, pred: &[String], gt: &[String]) -> (f64, f64, f64) {
        let p = self.groups(pred);
        let g = self.groups(gt);
        if p.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let mut hits = 0usize;
        for a in &p {
            for b in &g {
                if a == b {
                    hits += 1;
                }
            }
        }
        let acc = hits as f64 / p.len() as f64;
        let rec = hits as f64 / g.len() as f64;
        (acc, rec, (acc + rec) / 2.0)
    }

    /// Per-sample scores in manifest order and the macro means.
    pub fn evaluate(
        &self,
        manifest: &Path,
        predictions: &BTreeMap<String, Vec<String>>,
    ) -> (Vec<(String, Scores)>, Scores) {
        let mut per = Vec::new();
        for rec in read_lines(manifest) {
            let id = rec["id"].as_str().unwrap().to_string();
            let gt: Vec<String> = rec["gt_labels"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect();
            let pred = predictions.get(&id).cloned().unwrap_or_default();
            per.push((id, self.score(&pred, &gt)));
        }
        let n = per.len() as f64;
        let mut sums = (0.0, 0.0, 0.0);
        for (_, (a, r, v)) in &per {
            sums.0 += a;
            sums.1 += r;
            sums.2 += v;
        }
        (per, (sums.0 / n, sums.1 / n, sums.2 / n))
    }
}

/// `sample_id -> raw labels` from a prediction file.
pub fn raw_prediction_labels(path: &Path) -> BTreeMap<String, Vec<String>> {
    read_lines(path)
        .into_iter()
        .map(|v| {
            let labels = v["labels"]
                .as_array()
                .unwrap()
                .iter()
                .map(|l| l.as_str().unwrap().to_string())
                .collect();
            (v["sample_id"].as_str().unwrap().to_string(), labels)
        })
        .collect()
}

/// `sample_id -> labels` recovered from persisted raw response texts.
pub fn labels_from_audit(out: &Path, model: &str, ids: &[String]) -> BTreeMap<String, Vec<String>> {
    ids.iter()
        .map(|id| {
            let path = out.join("audit").join(id).join(format!("{model}.response.txt"));
            let labels = fs::read_to_string(path).map(|t| oracle_labels_from_text(&t)).unwrap_or_default();
            (id.clone(), labels)
        })
        .collect()
}

/// Every file under `root` as relative path -> bytes.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
