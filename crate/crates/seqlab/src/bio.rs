//! BIO label interpretation shared by the augmenter and the scorer.

/// Half-open token range [start, end) carrying an entity type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// True when every label is O, B-*, or I-*; corpora that fail this are
/// treated as plain per-token tagsets (accuracy metric, token-level units).
pub fn is_bio_labelset<S: AsRef<str>>(labels: impl IntoIterator<Item = S>) -> bool {
    labels.into_iter().all(|l| {
        let l = l.as_ref();
        l == "O" || l.starts_with("B-") || l.starts_with("I-")
    })
}

/// Extract entity spans from one BIO-labeled sentence. An I-X that does not
/// continue an open X span opens a new one, and the repair is reported in
/// the lint list.
pub fn spans(labels: &[String]) -> (Vec<Span>, Vec<String>) {
    let mut out = Vec::new();
    let mut lints = Vec::new();
    let mut open: Option<Span> = None;
    for (i, label) in labels.iter().enumerate() {
        if let Some(kind) = label.strip_prefix("B-") {
            if let Some(s) = open.take() {
                out.push(s);
            }
            open = Some(Span { start: i, end: i + 1, kind: kind.to_string() });
        } else if let Some(kind) = label.strip_prefix("I-") {
            match &mut open {
                Some(s) if s.kind == kind => s.end = i + 1,
                _ => {
                    if let Some(s) = open.take() {
                        out.push(s);
                    }
                    lints.push(format!(
                        "token {i}: {label} continues nothing; treated as a span start"
                    ));
                    open = Some(Span { start: i, end: i + 1, kind: kind.to_string() });
                }
            }
        } else {
            if let Some(s) = open.take() {
                out.push(s);
            }
        }
    }
    if let Some(s) = open.take() {
        out.push(s);
    }
    (out, lints)
}
