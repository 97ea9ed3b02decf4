//! Mini-batch training with gradient clipping, early stopping on the dev
//! metric, and restoration of the best snapshot.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment;
use crate::autodiff::{Adam, GradBuffer, Graph};
use crate::config::TrainSection;
use crate::corpus::LabeledSequence;
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metric};
use crate::model::Tagger;

// Training draws from streams far above the augmenter's per-sample ones so
// the two subsystems never share a random sequence.
pub const STREAM_ORDER: u64 = 1 << 40;
pub const STREAM_DROPOUT: u64 = STREAM_ORDER + 1;
pub const STREAM_FEWSHOT: u64 = STREAM_ORDER + 2;
pub const STREAM_MODEL_INIT: u64 = STREAM_ORDER + 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_dev: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
}

/// Source sentences, the few-shot slice of the target side, then shuffled
/// copies of the mix. A fraction of zero adds nothing and draws nothing.
pub fn assemble_training_set(
    source: &[LabeledSequence],
    target: Option<&[LabeledSequence]>,
    section: &TrainSection,
) -> Vec<LabeledSequence> {
    let mut data: Vec<LabeledSequence> = source.to_vec();
    let f = section.fewshot_target_fraction;
    if f > 0.0 {
        let target = target.unwrap_or(&[]);
        let count = ((f * source.len() as f64).round() as usize).min(target.len());
        if count > 0 {
            let mut indices: Vec<usize> = (0..target.len()).collect();
            indices.shuffle(&mut stream_rng(section.seed, STREAM_FEWSHOT));
            let mut picked: Vec<usize> = indices.into_iter().take(count).collect();
            picked.sort_unstable();
            data.extend(picked.into_iter().map(|i| target[i].clone()));
        }
    }
    if section.augment.copies > 0 {
        data = augment::expand_training_set(
            &data,
            section.augment.copies,
            section.augment.k,
            section.seed,
        );
    }
    data
}

/// Train in place. Every epoch shuffles the sentence order, accumulates
/// batch-mean gradients sentence by sentence, clips their global norm, and
/// steps Adam; the parameters scoring best on dev are restored at the end.
pub fn train(
    tagger: &mut Tagger,
    train_data: &[LabeledSequence],
    dev_data: &[LabeledSequence],
    section: &TrainSection,
    metric: Metric,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(Error::Data("the training set is empty".into()));
    }
    let prepared: Vec<(Vec<usize>, Vec<usize>)> = train_data
        .iter()
        .map(|s| Ok((tagger.token_ids(&s.tokens), tagger.label_ids(&s.labels)?)))
        .collect::<Result<_>>()?;

    let mut order_rng = stream_rng(section.seed, STREAM_ORDER);
    let mut dropout_rng = stream_rng(section.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(&tagger.store, section.learning_rate);
    let mut grads = GradBuffer::new(&tagger.store);

    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_store = None;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=section.epochs {
        epochs_run = epoch;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(section.batch_size) {
            grads.zero();
            let weight = 1.0 / batch.len() as f64;
            for &idx in batch {
                let (ids, gold) = &prepared[idx];
                let mut g = Graph::new();
                let loss = tagger.loss_node(&mut g, ids, gold, &mut dropout_rng)?;
                loss_sum += g.forward_eval(loss)?.item();
                g.backward(loss)?;
                for (pid, grad) in g.param_grads() {
                    grads.accumulate(pid, grad, weight);
                }
            }
            if !grads.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradients in epoch {epoch}"
                )));
            }
            grads.clip_global_norm(section.clip_norm);
            adam.step(&mut tagger.store, &grads)?;
        }

        let predictions = tagger.predict_corpus(dev_data)?;
        let dev_score = evaluate(dev_data, &predictions, metric).primary();
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / prepared.len() as f64,
            dev_score,
        };
        on_epoch(&stats);
        history.push(stats);

        if dev_score > best_score {
            best_score = dev_score;
            best_epoch = epoch;
            best_store = Some(tagger.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > section.patience {
                break;
            }
        }
    }

    if let Some(store) = best_store {
        tagger.store = store;
    }
    Ok(TrainOutcome {
        best_dev: best_score,
        best_epoch,
        epochs_run,
        history,
    })
}
