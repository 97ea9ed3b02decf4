//! Scoring predictions: exact-boundary span F1 for BIO tagsets, token
//! accuracy for plain ones. All values live in [0, 1].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bio;
use crate::corpus::LabeledSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SpanF1,
    Accuracy,
}

/// Choose the metric a corpus supports: span F1 when every label is
/// BIO-shaped, accuracy otherwise.
pub fn metric_for(seqs: &[LabeledSequence]) -> Metric {
    let all = seqs.iter().flat_map(|s| s.labels.iter());
    if bio::is_bio_labelset(all) {
        Metric::SpanF1
    } else {
        Metric::Accuracy
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub token_accuracy: f64,
    pub per_label: Vec<LabelScore>,
    pub lints: Vec<String>,
    pub sentences: usize,
    pub tokens: usize,
}

impl EvalReport {
    /// The model-selection number: span F1 or accuracy depending on metric.
    pub fn primary(&self) -> f64 {
        match self.metric {
            Metric::SpanF1 => self.f1,
            Metric::Accuracy => self.token_accuracy,
        }
    }
}

fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let r = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

#[derive(Default, Clone, Copy)]
struct Counts {
    gold: usize,
    predicted: usize,
    correct: usize,
}

/// Score predictions against references. Predicted label sequences must
/// align with the gold sentences one for one.
pub fn evaluate(gold: &[LabeledSequence], predictions: &[Vec<String>], metric: Metric) -> EvalReport {
    assert_eq!(
        gold.len(),
        predictions.len(),
        "prediction count must match sentence count"
    );
    let mut token_correct = 0usize;
    let mut token_total = 0usize;
    let mut by_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut lints = Vec::new();

    for (si, (g, p)) in gold.iter().zip(predictions).enumerate() {
        assert_eq!(
            g.len(),
            p.len(),
            "sentence {si}: prediction length differs from gold"
        );
        token_total += g.len();
        token_correct += g.labels.iter().zip(p).filter(|(a, b)| a == b).count();

        match metric {
            Metric::SpanF1 => {
                let (gold_spans, gl) = bio::spans(&g.labels);
                let (pred_spans, pl) = bio::spans(p);
                lints.extend(gl.into_iter().map(|m| format!("sentence {si} gold: {m}")));
                lints.extend(pl.into_iter().map(|m| format!("sentence {si} predicted: {m}")));
                let mut matched = vec![false; pred_spans.len()];
                for s in &gold_spans {
                    by_label.entry(s.kind.clone()).or_default().gold += 1;
                    if let Some(j) =
                        (0..pred_spans.len()).find(|&j| !matched[j] && pred_spans[j] == *s)
                    {
                        matched[j] = true;
                        by_label.entry(s.kind.clone()).or_default().correct += 1;
                    }
                }
                for t in &pred_spans {
                    by_label.entry(t.kind.clone()).or_default().predicted += 1;
                }
            }
            Metric::Accuracy => {
                for (a, b) in g.labels.iter().zip(p) {
                    by_label.entry(a.clone()).or_default().gold += 1;
                    by_label.entry(b.clone()).or_default().predicted += 1;
                    if a == b {
                        by_label.entry(a.clone()).or_default().correct += 1;
                    }
                }
            }
        }
    }

    let totals = by_label.values().fold(Counts::default(), |acc, c| Counts {
        gold: acc.gold + c.gold,
        predicted: acc.predicted + c.predicted,
        correct: acc.correct + c.correct,
    });
    let (precision, recall, f1) = prf(totals.correct, totals.predicted, totals.gold);
    let per_label = by_label
        .into_iter()
        .map(|(label, c)| {
            let (p, r, f) = prf(c.correct, c.predicted, c.gold);
            LabelScore {
                label,
                gold: c.gold,
                predicted: c.predicted,
                correct: c.correct,
                precision: p,
                recall: r,
                f1: f,
            }
        })
        .collect();
    let token_accuracy = if token_total == 0 {
        0.0
    } else {
        token_correct as f64 / token_total as f64
    };
    EvalReport {
        metric,
        precision,
        recall,
        f1,
        token_accuracy,
        per_label,
        lints,
        sentences: gold.len(),
        tokens: token_total,
    }
}

/// Human-readable report block.
pub fn render_text(name: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{name}: {} sentences, {} tokens\n",
        report.sentences, report.tokens
    ));
    match report.metric {
        Metric::SpanF1 => out.push_str(&format!(
            "  span precision {:.4}  recall {:.4}  f1 {:.4}  (token accuracy {:.4})\n",
            report.precision, report.recall, report.f1, report.token_accuracy
        )),
        Metric::Accuracy => out.push_str(&format!(
            "  token accuracy {:.4}\n",
            report.token_accuracy
        )),
    }
    let width = report
        .per_label
        .iter()
        .map(|l| l.label.len())
        .chain(["label".len()])
        .max()
        .unwrap_or(5);
    out.push_str(&format!(
        "  {:width$}  {:>6} {:>6} {:>7}  {:>6} {:>6} {:>6}\n",
        "label", "gold", "pred", "correct", "prec", "rec", "f1"
    ));
    for l in &report.per_label {
        out.push_str(&format!(
            "  {:width$}  {:>6} {:>6} {:>7}  {:>6.4} {:>6.4} {:>6.4}\n",
            l.label, l.gold, l.predicted, l.correct, l.precision, l.recall, l.f1
        ));
    }
    const SHOWN: usize = 8;
    for lint in report.lints.iter().take(SHOWN) {
        out.push_str(&format!("  note: {lint}\n"));
    }
    if report.lints.len() > SHOWN {
        out.push_str(&format!("  note: (+{} more)\n", report.lints.len() - SHOWN));
    }
    out
}

pub const TSV_HEADER: &str = "dataset\tmetric\tprecision\trecall\tf1\ttoken_accuracy\tsentences\ttokens";

/// The metric columns of a TSV row, without any leading identity columns.
pub fn tsv_row_fields(report: &EvalReport) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
        match report.metric {
            Metric::SpanF1 => "span_f1",
            Metric::Accuracy => "accuracy",
        },
        report.precision,
        report.recall,
        report.f1,
        report.token_accuracy,
        report.sentences,
        report.tokens
    )
}

pub fn tsv_row(name: &str, report: &EvalReport) -> String {
    format!("{name}\t{}", tsv_row_fields(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[&str], labels: &[&str]) -> LabeledSequence {
        LabeledSequence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn preds(rows: &[&[&str]]) -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| r.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn exact_boundary_and_type_matching() {
        // gold: PER(0,2), LOC(3,4); predicted: PER(0,1), LOC(3,4)
        let gold = vec![seq(
            &["anna", "marie", "visited", "oslo"],
            &["B-PER", "I-PER", "O", "B-LOC"],
        )];
        let p = preds(&[&["B-PER", "O", "O", "B-LOC"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.token_accuracy, 0.75);
        let per: BTreeMap<_, _> = r.per_label.iter().map(|l| (l.label.as_str(), l)).collect();
        assert_eq!(per["PER"].correct, 0);
        assert_eq!(per["LOC"].correct, 1);
    }

    #[test]
    fn type_must_match_not_just_boundaries() {
        let gold = vec![seq(&["oslo"], &["B-LOC"])];
        let p = preds(&[&["B-ORG"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn empty_predictions_score_zero_not_nan() {
        let gold = vec![seq(&["a", "b"], &["B-X", "O"])];
        let p = preds(&[&["O", "O"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
        assert!(r.f1.is_finite());
    }

    #[test]
    fn perfect_prediction_is_one() {
        let gold = vec![
            seq(&["a", "b", "c"], &["B-X", "I-X", "O"]),
            seq(&["d"], &["B-Y"]),
        ];
        let p = preds(&[&["B-X", "I-X", "O"], &["B-Y"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.token_accuracy, 1.0);
    }

    #[test]
    fn orphan_continuation_in_predictions_is_scored_and_linted() {
        let gold = vec![seq(&["a", "b"], &["B-X", "I-X"])];
        // prediction opens with a bare I-X; it is repaired to a span start
        let p = preds(&[&["I-X", "I-X"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.f1, 1.0, "repaired span covers the same range");
        assert_eq!(r.lints.len(), 1);
        assert!(r.lints[0].contains("predicted"));
    }

    #[test]
    fn accuracy_metric_counts_tokens() {
        let gold = vec![seq(&["the", "dog"], &["DET", "NOUN"])];
        let p = preds(&[&["DET", "VERB"]]);
        let r = evaluate(&gold, &p, Metric::Accuracy);
        assert_eq!(r.token_accuracy, 0.5);
        assert_eq!(r.primary(), 0.5);
        let per: BTreeMap<_, _> = r.per_label.iter().map(|l| (l.label.as_str(), l)).collect();
        assert_eq!(per["DET"].correct, 1);
        assert_eq!(per["NOUN"].gold, 1);
        assert_eq!(per["VERB"].predicted, 1);
    }

    #[test]
    fn metric_detection() {
        let bio = vec![seq(&["a"], &["B-X"])];
        let pos = vec![seq(&["a"], &["NOUN"])];
        assert_eq!(metric_for(&bio), Metric::SpanF1);
        assert_eq!(metric_for(&pos), Metric::Accuracy);
    }

    #[test]
    fn duplicate_gold_spans_need_duplicate_predictions() {
        // two identical gold sentences, predictions correct once
        let gold = vec![seq(&["a"], &["B-X"]), seq(&["a"], &["B-X"])];
        let p = preds(&[&["B-X"], &["O"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.precision, 1.0);
    }

    #[test]
    fn report_renders_tsv_and_text() {
        let gold = vec![seq(&["a", "b"], &["B-X", "O"])];
        let p = preds(&[&["B-X", "O"]]);
        let r = evaluate(&gold, &p, Metric::SpanF1);
        let row = tsv_row("dev", &r);
        assert!(row.starts_with("dev\tspan_f1\t1.000000"));
        assert_eq!(row.split('\t').count(), TSV_HEADER.split('\t').count());
        let text = render_text("dev", &r);
        assert!(text.contains("span precision 1.0000"));
        assert!(text.contains("X"));
    }
}
