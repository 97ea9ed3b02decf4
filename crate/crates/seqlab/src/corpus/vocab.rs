//! Token and label vocabularies with deterministic index assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LabeledSequence;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token vocabulary. Index 0 is padding, index 1 the unknown token; the
/// rest are corpus tokens ordered by descending frequency with ties broken
/// lexicographically, so a rebuilt vocabulary is bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(seqs: impl IntoIterator<Item = &'a LabeledSequence>, min_count: usize) -> Vocab {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for seq in seqs {
            for tok in &seq.tokens {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Corpus tokens in index order, excluding the two specials.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Label set in sorted order. Unlike tokens, an unknown label is an error:
/// silently mapping it would corrupt the metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelVocab {
    pub fn build<'a>(seqs: impl IntoIterator<Item = &'a LabeledSequence>) -> LabelVocab {
        let mut set: Vec<String> = seqs
            .into_iter()
            .flat_map(|s| s.labels.iter().cloned())
            .collect();
        set.sort();
        set.dedup();
        let index = set.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        LabelVocab { labels: set, index }
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.index.get(label).copied().ok_or_else(|| {
            Error::Data(format!("label {label:?} does not occur in the training set"))
        })
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}
