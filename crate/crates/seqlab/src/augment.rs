//! Word-order noise with a displacement budget.
//!
//! A shuffle with limit k moves no unit more than k slots from where it
//! started; entity spans travel whole so their internal order and labels
//! survive. Limit 0 is exactly the identity, the unbounded limit is a
//! uniform shuffle.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bio;
use crate::corpus::LabeledSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleLimit {
    Finite(usize),
    Unbounded,
}

impl Serialize for ShuffleLimit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ShuffleLimit::Finite(k) => s.serialize_u64(*k as u64),
            ShuffleLimit::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ShuffleLimit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            // TOML spells infinity as a bare float
            Float(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) if k >= 0 => Ok(ShuffleLimit::Finite(k as usize)),
            Raw::Int(k) => Err(D::Error::custom(format!("shuffle limit {k} is negative"))),
            Raw::Float(f) if f == f64::INFINITY => Ok(ShuffleLimit::Unbounded),
            Raw::Float(f) => Err(D::Error::custom(format!(
                "shuffle limit must be a whole number or inf, got {f}"
            ))),
            Raw::Str(s) if s == "inf" || s == "unbounded" => Ok(ShuffleLimit::Unbounded),
            Raw::Str(s) => Err(D::Error::custom(format!(
                "shuffle limit must be a non-negative integer or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Random permutation of 0..len where position j receives source index
/// perm[j] and |perm[j] - j| <= k for the finite limit. Finite limits add
/// uniform noise in [0, k+1) to each index and sort; an element can pass
/// at most k neighbors before the offsets outrun it. The unbounded limit
/// is a uniform shuffle.
pub fn constrained_permutation(
    len: usize,
    limit: ShuffleLimit,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    match limit {
        ShuffleLimit::Unbounded => {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(rng);
            perm
        }
        ShuffleLimit::Finite(k) => {
            let keys: Vec<f64> = (0..len)
                .map(|i| i as f64 + rng.gen_range(0.0..(k + 1) as f64))
                .collect();
            let mut perm: Vec<usize> = (0..len).collect();
            perm.sort_by(|a, b| keys[*a].partial_cmp(&keys[*b]).expect("keys are finite"));
            perm
        }
    }
}

/// Shuffle-atomic chunks of a sentence: each entity span is one unit,
/// every other token its own unit, in left-to-right order.
pub fn unit_ranges(seq: &LabeledSequence) -> Vec<Range<usize>> {
    let (spans, _) = bio::spans(&seq.labels);
    let mut ranges = Vec::new();
    let mut next_span = spans.iter().peekable();
    let mut i = 0;
    while i < seq.len() {
        match next_span.peek() {
            Some(s) if s.start == i => {
                ranges.push(s.start..s.end);
                i = s.end;
                next_span.next();
            }
            _ => {
                ranges.push(i..i + 1);
                i += 1;
            }
        }
    }
    ranges
}

/// One shuffled copy of a sentence. Labels ride along with their tokens.
pub fn shuffle_within(
    seq: &LabeledSequence,
    limit: ShuffleLimit,
    rng: &mut ChaCha8Rng,
) -> LabeledSequence {
    let ranges = unit_ranges(seq);
    let perm = constrained_permutation(ranges.len(), limit, rng);
    let mut tokens = Vec::with_capacity(seq.len());
    let mut labels = Vec::with_capacity(seq.len());
    for &src in &perm {
        let r = ranges[src].clone();
        tokens.extend_from_slice(&seq.tokens[r.clone()]);
        labels.extend_from_slice(&seq.labels[r]);
    }
    LabeledSequence { tokens, labels }
}

/// Originals plus `copies` shuffled variants of each. Every (sentence
/// index, copy) pair draws from its own rng stream, so the noise applied
/// to one sentence never depends on what the other sentences contain or
/// on the order the copies are consumed in.
pub fn expand_training_set(
    data: &[LabeledSequence],
    copies: usize,
    limit: ShuffleLimit,
    seed: u64,
) -> Vec<LabeledSequence> {
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(data.len() * (copies + 1));
    for (i, seq) in data.iter().enumerate() {
        out.push(seq.clone());
        for c in 0..copies {
            let mut rng = base.clone();
            rng.set_stream((i * copies + c) as u64);
            out.push(shuffle_within(seq, limit, &mut rng));
        }
    }
    out
}

/// One shuffled variant per sentence, for evaluating under word-order noise.
pub fn noisy_copy(
    data: &[LabeledSequence],
    limit: ShuffleLimit,
    seed: u64,
) -> Vec<LabeledSequence> {
    let base = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            shuffle_within(seq, limit, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn seq(tokens: &[&str], labels: &[&str]) -> LabeledSequence {
        LabeledSequence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn limit_zero_is_identity() {
        let mut r = rng(1);
        for len in [0, 1, 5, 17] {
            let perm = constrained_permutation(len, ShuffleLimit::Finite(0), &mut r);
            assert_eq!(perm, (0..len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn displacement_never_exceeds_limit() {
        let mut r = rng(2);
        for k in [1usize, 2, 3] {
            for _ in 0..300 {
                let perm = constrained_permutation(12, ShuffleLimit::Finite(k), &mut r);
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..12).collect::<Vec<_>>(), "not a permutation");
                for (j, &src) in perm.iter().enumerate() {
                    assert!(
                        src.abs_diff(j) <= k,
                        "k={k}: source {src} landed at {j} in {perm:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn limit_one_on_four_items_reaches_exactly_the_five_legal_permutations() {
        // brute force the ground truth
        let mut legal = Vec::new();
        let mut items = vec![0usize, 1, 2, 3];
        permute(&mut items, 0, &mut legal);
        legal.retain(|p| p.iter().enumerate().all(|(j, &s)| s.abs_diff(j) <= 1));
        assert_eq!(legal.len(), 5);

        let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut r = rng(3);
        for _ in 0..4000 {
            let p = constrained_permutation(4, ShuffleLimit::Finite(1), &mut r);
            *seen.entry(p).or_insert(0) += 1;
        }
        let observed: Vec<Vec<usize>> = seen.keys().cloned().collect();
        assert_eq!(observed, legal, "support mismatch");
        for (p, count) in &seen {
            assert!(*count > 40, "{p:?} seen only {count} times");
        }

        fn permute(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
            if start == items.len() {
                out.push(items.clone());
                return;
            }
            for i in start..items.len() {
                items.swap(start, i);
                permute(items, start + 1, out);
                items.swap(start, i);
            }
        }
    }

    #[test]
    fn unbounded_shuffle_is_roughly_uniform() {
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut r = rng(4);
        for _ in 0..6000 {
            let p = constrained_permutation(3, ShuffleLimit::Unbounded, &mut r);
            *counts.entry(p).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6, "all 3! permutations must occur");
        for (p, c) in &counts {
            assert!(*c >= 800, "{p:?} occurred {c} times, expected near 1000");
        }
    }

    #[test]
    fn entity_chunks_are_units() {
        // one three-token entity leaves four movable units
        let s = seq(
            &["set", "an", "alarm", "for", "9", "pm"],
            &["O", "O", "O", "B-DATETIME", "I-DATETIME", "I-DATETIME"],
        );
        let ranges = unit_ranges(&s);
        assert_eq!(ranges, vec![0..1, 1..2, 2..3, 3..6]);
    }

    #[test]
    fn plain_tagsets_shuffle_at_token_level() {
        let s = seq(&["the", "dog", "barks"], &["DET", "NOUN", "VERB"]);
        assert_eq!(unit_ranges(&s), vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn entities_stay_contiguous_under_unbounded_shuffles() {
        let s = seq(
            &["wake", "me", "at", "nine", "pm", "tomorrow"],
            &["O", "O", "O", "B-TIME", "I-TIME", "O"],
        );
        let mut r = rng(5);
        for _ in 0..200 {
            let shuffled = shuffle_within(&s, ShuffleLimit::Unbounded, &mut r);
            let pos = shuffled
                .labels
                .iter()
                .position(|l| l == "B-TIME")
                .expect("entity must survive");
            assert_eq!(shuffled.tokens[pos], "nine");
            assert_eq!(shuffled.labels[pos + 1], "I-TIME");
            assert_eq!(shuffled.tokens[pos + 1], "pm");
            // token/label pairing is preserved as a multiset
            let mut pairs: Vec<_> =
                shuffled.tokens.iter().zip(&shuffled.labels).collect();
            let mut orig: Vec<_> = s.tokens.iter().zip(&s.labels).collect();
            pairs.sort();
            orig.sort();
            assert_eq!(pairs, orig);
        }
    }

    #[test]
    fn expansion_keeps_originals_and_streams_are_content_independent() {
        let a = seq(&["a", "b", "c", "d"], &["O", "O", "O", "O"]);
        let b = seq(&["x", "y", "z", "w"], &["O", "O", "O", "O"]);
        let both = expand_training_set(&[a.clone(), b.clone()], 2, ShuffleLimit::Unbounded, 9);
        assert_eq!(both.len(), 6);
        assert_eq!(both[0], a);
        assert_eq!(both[3], b);
        // editing the first sentence leaves the second's noise untouched
        let edited = seq(&["e", "f", "g", "h", "i"], &["O", "O", "O", "O", "O"]);
        let swapped = expand_training_set(&[edited, b.clone()], 2, ShuffleLimit::Unbounded, 9);
        assert_eq!(&both[3..6], &swapped[3..6]);
        // and the whole expansion is reproducible
        let again = expand_training_set(&[a, b], 2, ShuffleLimit::Unbounded, 9);
        assert_eq!(both, again);
    }

    #[test]
    fn noisy_copy_is_deterministic_per_sentence() {
        let data = vec![
            seq(&["a", "b", "c", "d", "e"], &["O", "O", "O", "O", "O"]),
            seq(&["p", "q", "r", "s", "t"], &["O", "O", "O", "O", "O"]),
        ];
        let n1 = noisy_copy(&data, ShuffleLimit::Finite(2), 13);
        let n2 = noisy_copy(&data, ShuffleLimit::Finite(2), 13);
        assert_eq!(n1, n2);
        for (orig, noisy) in data.iter().zip(&n1) {
            let mut a = orig.tokens.clone();
            let mut b = noisy.tokens.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn limit_parses_from_int_or_inf() {
        #[derive(Deserialize)]
        struct Holder {
            k: ShuffleLimit,
        }
        let h: Holder = toml::from_str("k = 3").unwrap();
        assert_eq!(h.k, ShuffleLimit::Finite(3));
        let h: Holder = toml::from_str("k = \"inf\"").unwrap();
        assert_eq!(h.k, ShuffleLimit::Unbounded);
        let h: Holder = toml::from_str("k = inf").unwrap();
        assert_eq!(h.k, ShuffleLimit::Unbounded);
        assert!(toml::from_str::<Holder>("k = \"lots\"").is_err());
        assert!(toml::from_str::<Holder>("k = -2").is_err());
        assert!(toml::from_str::<Holder>("k = 1.5").is_err());
    }
}
