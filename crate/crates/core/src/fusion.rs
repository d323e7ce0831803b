//! Multi-model label fusion.
//!
//! Union keeps every synonym group any model predicted; vote keeps groups
//! predicted by at least `min_votes` distinct models. In both, models are
//! visited in priority order and labels in their set order, and the first
//! label seen for a group is the one emitted.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{GroupId, LabelSet, SynonymLexicon};
use crate::model::{EmptyReason, PredictedLabels, PredictionRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Union,
    Vote,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Union => "union",
            FusionStrategy::Vote => "vote",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(Self::Union),
            "vote" => Ok(Self::Vote),
            other => Err(format!("unknown fusion strategy `{other}` (expected union or vote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(default)]
    pub strategy: FusionStrategy,
    #[serde(default = "one")]
    pub min_votes: usize,
    pub model_priority: Vec<String>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("records mix sample ids `{0}` and `{1}`")]
    MixedSampleIds(String, String),
    #[error("model `{0}` is not in the priority list")]
    UnknownModelInPriority(String),
    #[error("model `{model}` appears twice for sample `{sample}`")]
    DuplicateModel { sample: String, model: String },
    #[error("min_votes = {min_votes} is invalid for {n_models} model(s)")]
    InvalidMinVotes { min_votes: usize, n_models: usize },
    #[error("model `{0}` listed twice in the priority list")]
    DuplicatePriority(String),
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let mut seen = HashSet::new();
        for m in &self.model_priority {
            if !seen.insert(m) {
                return Err(FusionError::DuplicatePriority(m.clone()));
            }
        }
        let n_models = self.model_priority.len();
        if self.min_votes == 0 || self.min_votes > n_models {
            return Err(FusionError::InvalidMinVotes {
                min_votes: self.min_votes,
                n_models,
            });
        }
        Ok(())
    }

    /// The model id written into fused prediction files.
    pub fn fused_model_id(&self) -> String {
        format!("fused:{}", self.strategy)
    }
}

struct Tally {
    label: String,
    votes: usize,
}

/// Groups in first-seen order with their surface form and distinct-model count.
fn tally(
    preds: &[PredictionRecord],
    lexicon: &SynonymLexicon,
    priority: &[String],
) -> Result<Vec<Tally>, FusionError> {
    if let Some(first) = preds.first() {
        if let Some(other) = preds.iter().find(|p| p.sample_id != first.sample_id) {
            return Err(FusionError::MixedSampleIds(
                first.sample_id.clone(),
                other.sample_id.clone(),
            ));
        }
    }
    let mut by_model: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if !priority.contains(&p.model_id) {
            return Err(FusionError::UnknownModelInPriority(p.model_id.clone()));
        }
        if by_model.insert(&p.model_id, p).is_some() {
            return Err(FusionError::DuplicateModel {
                sample: p.sample_id.clone(),
                model: p.model_id.clone(),
            });
        }
    }

    let mut order: Vec<Tally> = Vec::new();
    let mut index: HashMap<GroupId, usize> = HashMap::new();
    for model in priority {
        let Some(set) = by_model.get(model.as_str()).and_then(|p| p.labels.label_set()) else {
            continue;
        };
        let mut voted = HashSet::new();
        for label in set.iter() {
            let group = lexicon.group_of(label);
            let slot = *index.entry(group.clone()).or_insert_with(|| {
                order.push(Tally {
                    label: label.to_string(),
                    votes: 0,
                });
                order.len() - 1
            });
            if voted.insert(group) {
                order[slot].votes += 1;
            }
        }
    }
    Ok(order)
}

fn collect(tallies: Vec<Tally>, min_votes: usize) -> PredictedLabels {
    let kept: Vec<String> = tallies
        .into_iter()
        .filter(|t| t.votes >= min_votes)
        .map(|t| t.label)
        .collect();
    match LabelSet::from_normalized(kept) {
        Ok(set) => PredictedLabels::Labels(set),
        Err(_) => PredictedLabels::Empty(EmptyReason::NoConsensus),
    }
}

/// Synonym-deduplicated union of all models' labels.
pub fn fuse_union(
    preds: &[PredictionRecord],
    lexicon: &SynonymLexicon,
    priority: &[String],
) -> Result<PredictedLabels, FusionError> {
    Ok(collect(tally(preds, lexicon, priority)?, 1))
}

/// Keeps groups predicted by at least `min_votes` distinct models.
pub fn fuse_vote(
    preds: &[PredictionRecord],
    lexicon: &SynonymLexicon,
    min_votes: usize,
    priority: &[String],
) -> Result<PredictedLabels, FusionError> {
    if min_votes == 0 {
        return Err(FusionError::InvalidMinVotes {
            min_votes,
            n_models: priority.len(),
        });
    }
    Ok(collect(tally(preds, lexicon, priority)?, min_votes))
}

/// Fuses one sample according to `config`, producing a prediction record.
pub fn fuse_sample(
    sample_id: &str,
    preds: &[PredictionRecord],
    lexicon: &SynonymLexicon,
    config: &FusionConfig,
) -> Result<PredictionRecord, FusionError> {
    let labels = match config.strategy {
        FusionStrategy::Union => fuse_union(preds, lexicon, &config.model_priority)?,
        FusionStrategy::Vote => fuse_vote(preds, lexicon, config.min_votes, &config.model_priority)?,
    };
    Ok(PredictionRecord {
        sample_id: sample_id.to_string(),
        model_id: config.fused_model_id(),
        raw_text: None,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::{to_group_set, LexiconEntry};

    fn rec(model: &str, labels: &[&str]) -> PredictionRecord {
        PredictionRecord {
            sample_id: "s1".into(),
            model_id: model.into(),
            raw_text: None,
            labels: match LabelSet::from_normalized(labels.iter().copied()) {
                Ok(s) => PredictedLabels::Labels(s),
                Err(_) => PredictedLabels::Empty(EmptyReason::NoLabelBlock),
            },
        }
    }

    fn prio(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn joy() -> SynonymLexicon {
        SynonymLexicon::from_entries([LexiconEntry {
            group: "joy".into(),
            members: vec!["happy".into(), "joyful".into()],
        }])
        .unwrap()
    }

    fn labels(p: &PredictedLabels) -> Vec<&str> {
        p.label_set().map(|s| s.iter().collect()).unwrap_or_default()
    }

    #[test]
    fn single_model_is_identity() {
        let out = fuse_union(&[rec("a", &["happy"])], &SynonymLexicon::empty(), &prio(&["a"])).unwrap();
        assert_eq!(labels(&out), ["happy"]);
    }

    #[test]
    fn first_seen_surface_form_wins() {
        let preds = [rec("a", &["happy"]), rec("b", &["joyful"])];
        let out = fuse_union(&preds, &joy(), &prio(&["a", "b"])).unwrap();
        assert_eq!(labels(&out), ["happy"]);
        let expected = to_group_set(&LabelSet::from_normalized(["happy"]).unwrap(), &joy());
        assert_eq!(to_group_set(out.label_set().unwrap(), &joy()), expected);
        // Priority, not input order, decides.
        let out = fuse_union(&preds, &joy(), &prio(&["b", "a"])).unwrap();
        assert_eq!(labels(&out), ["joyful"]);
    }

    #[test]
    fn disjoint_union() {
        let preds = [rec("a", &["happy"]), rec("b", &["calm"]), rec("c", &["angry"])];
        let out = fuse_union(&preds, &SynonymLexicon::empty(), &prio(&["a", "b", "c"])).unwrap();
        assert_eq!(labels(&out), ["happy", "calm", "angry"]);
    }

    #[test]
    fn vote_counts_distinct_models() {
        let preds = [rec("a", &["happy"]), rec("b", &["happy", "calm"]), rec("c", &["happy"])];
        let p = prio(&["a", "b", "c"]);
        let out = fuse_vote(&preds, &SynonymLexicon::empty(), 2, &p).unwrap();
        assert_eq!(labels(&out), ["happy"]);
        let union = fuse_union(&preds, &SynonymLexicon::empty(), &p).unwrap();
        assert_eq!(fuse_vote(&preds, &SynonymLexicon::empty(), 1, &p).unwrap(), union);
    }

    #[test]
    fn synonyms_within_one_model_count_once() {
        let preds = [rec("a", &["happy", "joyful"]), rec("b", &["calm"])];
        let out = fuse_vote(&preds, &joy(), 2, &prio(&["a", "b"])).unwrap();
        assert_eq!(out, PredictedLabels::Empty(EmptyReason::NoConsensus));
    }

    #[test]
    fn no_consensus_is_empty_prediction() {
        let preds = [rec("a", &["calm"]), rec("b", &["angry"])];
        let out = fuse_vote(&preds, &SynonymLexicon::empty(), 2, &prio(&["a", "b"])).unwrap();
        assert_eq!(out, PredictedLabels::Empty(EmptyReason::NoConsensus));
    }

    #[test]
    fn empty_constituents_are_skipped() {
        let preds = [rec("a", &[]), rec("b", &["calm"])];
        let out = fuse_union(&preds, &SynonymLexicon::empty(), &prio(&["a", "b"])).unwrap();
        assert_eq!(labels(&out), ["calm"]);
        let out = fuse_union(&[rec("a", &[])], &SynonymLexicon::empty(), &prio(&["a"])).unwrap();
        assert_eq!(out, PredictedLabels::Empty(EmptyReason::NoConsensus));
    }

    #[test]
    fn errors() {
        let mut other = rec("b", &["calm"]);
        other.sample_id = "s2".into();
        let p = prio(&["a", "b"]);
        assert_eq!(
            fuse_union(&[rec("a", &["x"]), other], &SynonymLexicon::empty(), &p),
            Err(FusionError::MixedSampleIds("s1".into(), "s2".into()))
        );
        assert_eq!(
            fuse_union(&[rec("z", &["x"])], &SynonymLexicon::empty(), &p),
            Err(FusionError::UnknownModelInPriority("z".into()))
        );
        assert!(matches!(
            fuse_union(&[rec("a", &["x"]), rec("a", &["y"])], &SynonymLexicon::empty(), &p),
            Err(FusionError::DuplicateModel { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FusionConfig {
            strategy: FusionStrategy::Vote,
            min_votes: 3,
            model_priority: prio(&["a", "b"]),
        };
        assert!(matches!(cfg.validate(), Err(FusionError::InvalidMinVotes { .. })));
        cfg.min_votes = 2;
        assert!(cfg.validate().is_ok());
        cfg.model_priority.push("a".into());
        assert!(matches!(cfg.validate(), Err(FusionError::DuplicatePriority(_))));
        assert_eq!(cfg.fused_model_id(), "fused:vote");
        assert_eq!("union".parse::<FusionStrategy>().unwrap(), FusionStrategy::Union);
        assert!("mean".parse::<FusionStrategy>().is_err());
    }
}
