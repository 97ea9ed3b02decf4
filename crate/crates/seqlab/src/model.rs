//! A tagger: embedding table, encoder, and a scoring head, with save/load.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::corpus::vocab::{LabelVocab, Vocab};
use crate::corpus::LabeledSequence;
use crate::crf;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Crf,
    // "linear" is the conventional name for the same per-token head
    #[serde(alias = "linear")]
    Softmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub encoder: EncoderConfig,
    pub head: Head,
    pub d_embed: usize,
    pub freeze_embeddings: bool,
}

struct CrfParams {
    transitions: ParamId,
    start: ParamId,
    end: ParamId,
}

pub struct Tagger {
    pub config: TaggerConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub vocab: Vocab,
    pub labels: LabelVocab,
    embedding: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    crf: Option<CrfParams>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format_version: u32,
    config: TaggerConfig,
    vocab: Vocab,
    labels: LabelVocab,
    store: ParamStore,
}

impl Tagger {
    /// Build a tagger around an existing (possibly deserialized) store.
    /// `embedding_matrix` seeds a fresh |V| x d_embed table and is ignored
    /// when the store already carries one.
    fn wire(
        config: TaggerConfig,
        vocab: Vocab,
        labels: LabelVocab,
        mut store: ParamStore,
        embedding_matrix: Option<Tensor>,
        external_pe: Option<Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tagger> {
        if config.d_embed == 0 {
            return Err(Error::Config("d_embed must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("the label set is empty".into()));
        }
        let v = vocab.len();
        let d_embed = config.d_embed;
        let embedding = store.obtain(
            "embedding",
            &[v, d_embed],
            config.freeze_embeddings,
            || embedding_matrix.expect("fresh build must supply an embedding matrix"),
        )?;
        let encoder = Encoder::new(config.encoder.clone(), d_embed, external_pe, &mut store, rng)?;
        let d = encoder.config.d_model;
        let l = labels.len();
        let out_w = store.obtain("out.w", &[d, l], false, || Tensor::glorot(d, l, rng))?;
        let out_b = store.obtain("out.b", &[l], false, || Tensor::zeros(&[l]))?;
        let crf = match config.head {
            Head::Crf => Some(CrfParams {
                transitions: store.obtain("crf.transitions", &[l, l], false, || {
                    Tensor::zeros(&[l, l])
                })?,
                start: store.obtain("crf.start", &[l], false, || Tensor::zeros(&[l]))?,
                end: store.obtain("crf.end", &[l], false, || Tensor::zeros(&[l]))?,
            }),
            Head::Softmax => None,
        };
        Ok(Tagger {
            config,
            store,
            encoder,
            vocab,
            labels,
            embedding,
            out_w,
            out_b,
            crf,
        })
    }

    pub fn build(
        config: TaggerConfig,
        vocab: Vocab,
        labels: LabelVocab,
        embedding_matrix: Tensor,
        external_pe: Option<Tensor>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tagger> {
        Tagger::wire(
            config,
            vocab,
            labels,
            ParamStore::new(),
            Some(embedding_matrix),
            external_pe,
            rng,
        )
    }

    pub fn token_ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(t)).collect()
    }

    pub fn label_ids(&self, labels: &[String]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.labels.id(l)).collect()
    }

    /// Emission scores (n x L) for a sentence of token ids.
    pub fn emissions_node(
        &self,
        g: &mut Graph,
        ids: &[usize],
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Data("cannot tag an empty sentence".into()));
        }
        let table = g.param(&self.store, self.embedding);
        let embedded = g.gather_rows(table, ids);
        let encoded = self.encoder.encode(g, &self.store, embedded, train_mode, rng)?;
        let w = g.param(&self.store, self.out_w);
        let b = g.param(&self.store, self.out_b);
        let scores = g.matmul(encoded, w);
        Ok(g.add_bias(scores, b))
    }

    /// Training loss for one sentence: sequence-level negative
    /// log-likelihood under the CRF head, mean per-token cross-entropy
    /// under the softmax head.
    pub fn loss_node(
        &self,
        g: &mut Graph,
        ids: &[usize],
        gold: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        assert_eq!(ids.len(), gold.len(), "token/label length mismatch");
        let l = self.labels.len();
        assert!(gold.iter().all(|y| *y < l), "gold label out of range");
        let emissions = self.emissions_node(g, ids, true, rng)?;
        match &self.crf {
            Some(p) => {
                let tr = g.param(&self.store, p.transitions);
                let st = g.param(&self.store, p.start);
                let en = g.param(&self.store, p.end);
                Ok(crf::nll_node(g, emissions, tr, st, en, gold))
            }
            None => {
                let lse = g.row_logsumexp(emissions);
                let total = g.sum(lse);
                let flat: Vec<usize> =
                    gold.iter().enumerate().map(|(i, &y)| i * l + y).collect();
                let picked = g.gather_sum(emissions, &flat);
                let nll = g.sub(total, picked);
                Ok(g.scale(nll, 1.0 / ids.len() as f64))
            }
        }
    }

    /// Decode label ids for a sentence of token ids (no dropout, no rng).
    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        // eval mode never touches the rng; any seed works
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let emissions = self.emissions_node(&mut g, ids, false, &mut rng)?;
        let scores = g.forward_eval(emissions)?;
        match &self.crf {
            Some(p) => Ok(crf::viterbi(
                &scores,
                &self.store.get(p.transitions).tensor,
                &self.store.get(p.start).tensor,
                &self.store.get(p.end).tensor,
            )),
            None => {
                let l = self.labels.len();
                Ok((0..ids.len())
                    .map(|i| {
                        let row = &scores.data()[i * l..(i + 1) * l];
                        let mut best = 0;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect())
            }
        }
    }

    pub fn predict(&self, tokens: &[String]) -> Result<Vec<String>> {
        let ids = self.token_ids(tokens);
        Ok(self
            .predict_ids(&ids)?
            .into_iter()
            .map(|y| self.labels.label(y).to_string())
            .collect())
    }

    pub fn predict_corpus(&self, data: &[LabeledSequence]) -> Result<Vec<Vec<String>>> {
        data.iter().map(|s| self.predict(&s.tokens)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let saved = SavedModel {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
            store: self.store.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(&saved)
            .map_err(|e| Error::Data(format!("cannot serialize model: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tagger> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let saved: SavedModel = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{} is not a saved model: {e}", path.display())))?;
        if saved.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "model format {} not supported (expected {MODEL_FORMAT_VERSION})",
                saved.format_version
            )));
        }
        // the store already holds every tensor; the rng goes unused
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Tagger::wire(
            saved.config,
            saved.vocab,
            saved.labels,
            saved.store,
            None,
            None,
            &mut rng,
        )
    }

    /// CRF tables as plain tensors, for inspection and decoding.
    pub fn crf_tables(&self) -> Option<(&Tensor, &Tensor, &Tensor)> {
        self.crf.as_ref().map(|p| {
            (
                &self.store.get(p.transitions).tensor,
                &self.store.get(p.start).tensor,
                &self.store.get(p.end).tensor,
            )
        })
    }
}
