//! One experiment end to end: load corpora, build the tagger, train on the
//! source side, then score every configured dataset.

use std::path::Path;

use crate::augment::{self, ShuffleLimit};
use crate::autodiff::Tensor;
use crate::config::{DataSection, ExperimentConfig};
use crate::corpus::embeddings::{read_vectors, EmbeddingTable};
use crate::corpus::vocab::{LabelVocab, Vocab};
use crate::corpus::{read_conll, LabeledSequence};
use crate::encoder::PeMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_for, render_text, EvalReport, Metric};
use crate::model::Tagger;
use crate::train::{assemble_training_set, stream_rng, train, EpochStats, TrainOutcome};

// Stand-in table for an externally sourced frozen position matrix.
pub const STREAM_EXTERNAL_PE: u64 = crate::train::STREAM_ORDER + 4;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<LabeledSequence>,
    pub dev: Vec<LabeledSequence>,
    pub test: Option<Vec<LabeledSequence>>,
    pub target_train: Option<Vec<LabeledSequence>>,
    pub target_test: Option<Vec<LabeledSequence>>,
    pub vectors: Option<EmbeddingTable>,
}

pub fn load_data(d: &DataSection) -> Result<LoadedData> {
    let opt = |p: &Option<std::path::PathBuf>| -> Result<Option<Vec<LabeledSequence>>> {
        p.as_deref().map(read_conll).transpose()
    };
    Ok(LoadedData {
        train: read_conll(&d.train)?,
        dev: read_conll(&d.dev)?,
        test: opt(&d.test)?,
        target_train: opt(&d.target_train)?,
        target_test: opt(&d.target_test)?,
        vectors: d.vectors.as_deref().map(read_vectors).transpose()?,
    })
}

/// A scored dataset, tagged with everything needed to identify the run.
#[derive(Debug, Clone)]
pub struct NamedReport {
    pub dataset: String,
    pub report: EvalReport,
}

pub struct RunResult {
    pub tagger: Tagger,
    pub metric: Metric,
    pub outcome: TrainOutcome,
    pub reports: Vec<NamedReport>,
    pub fingerprint: String,
    pub seed: u64,
}

/// Train a fresh model under `config` and score it. Deterministic given
/// the config (which carries the seed).
pub fn run(
    config: &ExperimentConfig,
    data: &LoadedData,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<RunResult> {
    let seed = config.train.seed;
    let train_set = assemble_training_set(&data.train, data.target_train.as_deref(), &config.train);
    if train_set.is_empty() {
        return Err(Error::Data("the training set is empty".into()));
    }
    let vocab = Vocab::build(&train_set, config.data.min_count);
    let labels = LabelVocab::build(&train_set);
    let metric = metric_for(&train_set);

    // pretrained vectors dictate the embedding width when present
    let mut tagger_config = config.model.tagger_config();
    if let Some(table) = &data.vectors {
        if table.dim != tagger_config.d_embed {
            eprintln!(
                "note: word vectors are {}-dimensional; overriding d_embed={}",
                table.dim, tagger_config.d_embed
            );
            tagger_config.d_embed = table.dim;
        }
    }

    let external_pe = match tagger_config.encoder.pe_mode {
        PeMode::FrozenExternal => Some(Tensor::uniform(
            &[tagger_config.encoder.max_positions, tagger_config.encoder.d_model],
            0.1,
            &mut stream_rng(seed, STREAM_EXTERNAL_PE),
        )),
        _ => None,
    };

    let mut rng = stream_rng(seed, crate::train::STREAM_MODEL_INIT);
    let (emb, coverage) = crate::corpus::embeddings::embedding_matrix(
        &vocab,
        data.vectors.as_ref(),
        tagger_config.d_embed,
        &mut rng,
    )?;
    if data.vectors.is_some() {
        eprintln!(
            "vectors cover {}/{} vocabulary entries",
            coverage.covered, coverage.vocab_tokens
        );
    }
    let mut tagger = Tagger::build(tagger_config, vocab, labels, emb, external_pe, &mut rng)?;

    let outcome = train(&mut tagger, &train_set, &data.dev, &config.train, metric, on_epoch)?;
    let reports = score_datasets(&tagger, config, data, metric)?;
    Ok(RunResult {
        tagger,
        metric,
        outcome,
        reports,
        fingerprint: config.fingerprint(),
        seed,
    })
}

fn limit_tag(k: ShuffleLimit) -> String {
    match k {
        ShuffleLimit::Finite(k) => format!("k{k}"),
        ShuffleLimit::Unbounded => "kinf".to_string(),
    }
}

/// Score the dev set, the test sets, and noisy copies of the cleanest
/// available source test set (one per configured displacement limit).
pub fn score_datasets(
    tagger: &Tagger,
    config: &ExperimentConfig,
    data: &LoadedData,
    metric: Metric,
) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    let mut score = |name: &str, set: &[LabeledSequence]| -> Result<()> {
        let preds = tagger.predict_corpus(set)?;
        out.push(NamedReport {
            dataset: name.to_string(),
            report: evaluate(set, &preds, metric),
        });
        Ok(())
    };
    score("source_dev", &data.dev)?;
    if let Some(test) = &data.test {
        score("source_test", test)?;
    }
    let (clean_name, clean_set): (&str, &[LabeledSequence]) = match &data.test {
        Some(test) => ("source_test", test),
        None => ("source_dev", &data.dev),
    };
    for &k in &config.eval.noisy_ks {
        let noisy = augment::noisy_copy(clean_set, k, config.eval.noise_seed);
        score(&format!("{clean_name}_{}", limit_tag(k)), &noisy)?;
    }
    if let Some(target) = &data.target_test {
        score("target_test", target)?;
    }
    Ok(out)
}

pub const RUN_TSV_HEADER: &str =
    "dataset\tseed\tfingerprint\tmetric\tprecision\trecall\tf1\ttoken_accuracy\tsentences\ttokens";

pub fn run_tsv_row(seed: u64, fingerprint: &str, r: &NamedReport) -> String {
    format!(
        "{}\t{seed}\t{fingerprint}\t{}",
        r.dataset,
        crate::eval::tsv_row_fields(&r.report)
    )
}

pub fn render_run_text(result: &RunResult) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "seed {}  config {}  best dev {:.4} at epoch {}\n\n",
        result.seed, result.fingerprint, result.outcome.best_dev, result.outcome.best_epoch
    ));
    for r in &result.reports {
        out.push_str(&render_text(&r.dataset, &r.report));
        out.push('\n');
    }
    out
}

/// Write report.tsv and report.txt into `dir`.
pub fn write_reports(dir: &Path, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tsv = String::from(RUN_TSV_HEADER);
    tsv.push('\n');
    for r in &result.reports {
        tsv.push_str(&run_tsv_row(result.seed, &result.fingerprint, r));
        tsv.push('\n');
    }
    std::fs::write(dir.join("report.tsv"), tsv)?;
    std::fs::write(dir.join("report.txt"), render_run_text(result))?;
    Ok(())
}
