//! Labeled sequences and the column file format they travel in.

pub mod embeddings;
pub mod synth;
pub mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parse column-formatted sentences: one token per line with the surface
/// form in the first column and the label in the last, blank lines between
/// sentences. `-DOCSTART-` rows are document markers, not tokens.
pub fn parse_conll(text: &str) -> Result<Vec<LabeledSequence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            if !tokens.is_empty() {
                out.push(LabeledSequence {
                    tokens: std::mem::take(&mut tokens),
                    labels: std::mem::take(&mut labels),
                });
            }
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "line {}: expected token and label columns, got {:?}",
                lineno + 1,
                line
            )));
        }
        tokens.push(fields[0].to_string());
        labels.push(fields[fields.len() - 1].to_string());
    }
    if !tokens.is_empty() {
        out.push(LabeledSequence { tokens, labels });
    }
    Ok(out)
}

pub fn read_conll(path: &Path) -> Result<Vec<LabeledSequence>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_conll(&text)
}

pub fn to_conll(seqs: &[LabeledSequence]) -> String {
    let mut out = String::new();
    for (i, seq) in seqs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, lab) in seq.tokens.iter().zip(&seq.labels) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(lab);
            out.push('\n');
        }
    }
    out
}

pub fn write_conll(path: &Path, seqs: &[LabeledSequence]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, to_conll(seqs))?;
    Ok(())
}
