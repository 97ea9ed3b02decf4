//! Word-vector files and the embedding matrix assembled from them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Parse the text vector format: `token v1 v2 ... vd` per line. A first
/// line of exactly two positive integers is a count/dimension header and
/// is skipped; detection is automatic. The first data line fixes the
/// dimension. Repeated tokens keep their first vector.
pub fn parse_vectors(text: &str) -> Result<EmbeddingTable> {
    let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if lineno == 0 && fields.len() == 2 {
            let counts: Vec<Option<usize>> = fields
                .iter()
                .map(|f| f.parse::<usize>().ok().filter(|v| *v > 0))
                .collect();
            if counts.iter().all(|c| c.is_some()) {
                continue; // header row
            }
        }
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "line {}: a vector row needs a token and at least one value",
                lineno + 1
            )));
        }
        let token = fields[0];
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Data(format!("line {}: {f:?} is not a number", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Data(format!(
                    "line {}: vector has {} values, earlier rows had {d}",
                    lineno + 1,
                    values.len()
                )));
            }
            Some(_) => {}
        }
        vectors.entry(token.to_string()).or_insert(values);
    }
    let dim = dim.ok_or_else(|| Error::Data("vector file has no rows".into()))?;
    Ok(EmbeddingTable { dim, vectors })
}

pub fn read_vectors(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_vectors(&text)
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub covered: usize,
    pub vocab_tokens: usize,
    pub dim: usize,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        if self.vocab_tokens == 0 {
            1.0
        } else {
            self.covered as f64 / self.vocab_tokens as f64
        }
    }
}

/// Assemble the |V| x d matrix for a vocabulary. Tokens found in `table`
/// copy their vectors; everything else (including the unknown token) draws
/// from U(-sqrt(3/d), sqrt(3/d)). The padding row stays zero.
pub fn embedding_matrix(
    vocab: &Vocab,
    table: Option<&EmbeddingTable>,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, CoverageReport)> {
    if let Some(t) = table {
        if t.dim != dim {
            return Err(Error::Config(format!(
                "embedding dim {dim} does not match vector file dim {}",
                t.dim
            )));
        }
    }
    let limit = (3.0 / dim as f64).sqrt();
    let mut m = Tensor::zeros(&[vocab.len(), dim]);
    let mut covered = 0;
    for id in 0..vocab.len() {
        if id == PAD {
            continue;
        }
        let token = vocab.token(id);
        let row = &mut m.data_mut()[id * dim..(id + 1) * dim];
        match table.and_then(|t| t.get(token)) {
            Some(vec) => {
                row.copy_from_slice(vec);
                covered += 1;
            }
            None => {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-limit..limit);
                }
            }
        }
    }
    let report = CoverageReport {
        covered,
        // specials never count toward coverage
        vocab_tokens: vocab.len().saturating_sub(2),
        dim,
    };
    Ok((m, report))
}
