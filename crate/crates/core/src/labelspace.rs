//! From free-text model output to canonical labels and synonym groups.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("label `{0}` is empty after normalization")]
    EmptyAfterNormalization(String),
    #[error("no bracketed label block in response")]
    NoLabelBlock,
    #[error("no usable label remains")]
    EmptySet,
}

/// Lowercases, trims surrounding whitespace/punctuation and collapses inner
/// whitespace. Idempotent.
///
/// Anything that is not alphanumeric counts as punctuation at the edges, so
/// markdown emphasis (`**happy**`) and full-width marks (`！`) are removed
/// too. Inner punctuation is kept.
pub fn normalize_label(raw: &str) -> Result<String, LabelError> {
    let lowered = raw.to_lowercase();
    let trimmed = lowered.trim_matches(|c: char| !c.is_alphanumeric());
    let collapsed = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        Err(LabelError::EmptyAfterNormalization(raw.to_string()))
    } else {
        Ok(collapsed)
    }
}

const OPEN: [char; 2] = ['[', '［'];
const CLOSE: [char; 2] = [']', '］'];
const SEPARATORS: [char; 3] = [',', '，', '、'];

/// Returns the items of the last `[...]` block in `text`.
///
/// Items are split on `,`, `，` and `、`, trimmed, and empty items dropped.
pub fn extract_label_block(text: &str) -> Result<Vec<String>, LabelError> {
    let close = text.rfind(CLOSE).ok_or(LabelError::NoLabelBlock)?;
    let open = text[..close].rfind(OPEN).ok_or(LabelError::NoLabelBlock)?;
    let open_len = text[open..].chars().next().map_or(1, char::len_utf8);
    Ok(text[open + open_len..close]
        .split(SEPARATORS)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect())
}

/// Ordered, duplicate-free, nonempty collection of normalized labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    /// Builds from labels already in normalized form.
    pub fn from_normalized<I, S>(labels: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for l in labels {
            let l = l.into();
            if let Ok(n) = normalize_label(&l) {
                debug_assert_eq!(n, l, "label not normalized");
            }
            if seen.insert(l.clone()) {
                out.push(l);
            }
        }
        if out.is_empty() {
            return Err(LabelError::EmptySet);
        }
        Ok(Self(out))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        to_label_set(&raw)
            .map(|(set, _)| set)
            .map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.0.join(", "))
    }
}

/// Normalizes and deduplicates (first occurrence wins).
///
/// Items that normalize to nothing are skipped and returned as warnings.
pub fn to_label_set<S: AsRef<str>>(raw: &[S]) -> Result<(LabelSet, Vec<LabelError>), LabelError> {
    let mut warnings = Vec::new();
    let mut labels = Vec::new();
    for item in raw {
        match normalize_label(item.as_ref()) {
            Ok(l) => labels.push(l),
            Err(e) => warnings.push(e),
        }
    }
    Ok((LabelSet::from_normalized(labels)?, warnings))
}

/// Parses a full model response into a label set.
pub fn parse_response(text: &str) -> Result<LabelSet, LabelError> {
    let raw = extract_label_block(text)?;
    to_label_set(&raw).map(|(set, _)| set)
}

/// Identity of a synonym group. Labels absent from the lexicon form their
/// own singleton group, kept distinct from named groups.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    Named(String),
    Singleton(String),
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Named(g) => write!(f, "{g}"),
            GroupId::Singleton(l) => write!(f, "={l}"),
        }
    }
}

/// One line of a lexicon file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub group: String,
    pub members: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("label `{label}` belongs to both `{first}` and `{second}`")]
    OverlappingMembership {
        label: String,
        first: String,
        second: String,
    },
    #[error("group `{0}` defined twice")]
    DuplicateGroup(String),
    #[error("group `{0}` has no usable member")]
    EmptyGroup(String),
}

/// Partition of labels into synonym groups.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, String>,
    representatives: BTreeMap<String, String>,
}

impl SynonymLexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Members are normalized; unusable members are dropped. The first
    /// member becomes the group's representative.
    pub fn from_entries(entries: impl IntoIterator<Item = LexiconEntry>) -> Result<Self, LexiconError> {
        let mut lex = Self::default();
        for entry in entries {
            if lex.representatives.contains_key(&entry.group) {
                return Err(LexiconError::DuplicateGroup(entry.group));
            }
            let mut rep = None;
            for m in &entry.members {
                let Ok(label) = normalize_label(m) else { continue };
                match lex.entries.get(&label) {
                    Some(g) if *g == entry.group => continue,
                    Some(g) => {
                        return Err(LexiconError::OverlappingMembership {
                            label,
                            first: g.clone(),
                            second: entry.group,
                        })
                    }
                    None => {}
                }
                rep.get_or_insert_with(|| label.clone());
                lex.entries.insert(label, entry.group.clone());
            }
            let rep = rep.ok_or_else(|| LexiconError::EmptyGroup(entry.group.clone()))?;
            lex.representatives.insert(entry.group, rep);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::from_entries(jsonl::read::<LexiconEntry>(path)?)
    }

    pub fn group_of(&self, label: &str) -> GroupId {
        match self.entries.get(label) {
            Some(g) => GroupId::Named(g.clone()),
            None => GroupId::Singleton(label.to_string()),
        }
    }

    pub fn representative<'a>(&'a self, group: &'a GroupId) -> Option<&'a str> {
        match group {
            GroupId::Named(g) => self.representatives.get(g).map(String::as_str),
            GroupId::Singleton(l) => Some(l),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Maps each label to its group, collapsing repeats (first occurrence wins).
pub fn to_group_set(labels: &LabelSet, lexicon: &SynonymLexicon) -> Vec<GroupId> {
    let mut seen = HashSet::new();
    labels
        .iter()
        .map(|l| lexicon.group_of(l))
        .filter(|g| seen.insert(g.clone()))
        .collect()
}
