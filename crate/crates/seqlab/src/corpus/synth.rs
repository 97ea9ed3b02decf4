//! Synthetic template language with a systematically reordered twin.
//!
//! Sentences come from templates whose units are literal words or slots
//! filled by entity phrases. The source side keeps template order; the
//! target side applies a deterministic unit reorder (reverse by default, or
//! an explicit permutation per template) while keeping every phrase intact,
//! so the two sides share content statistics but not word order.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledSequence;
use crate::error::{Error, Result};

pub const SPEC_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    Reverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
    #[serde(default)]
    pub target_order: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub spec_version: String,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub target_reorder: Reorder,
    pub fillers: BTreeMap<String, Vec<String>>,
    pub templates: Vec<Template>,
}

#[derive(Debug)]
pub struct SynthCorpus {
    pub train: Vec<LabeledSequence>,
    pub dev: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub target_train: Vec<LabeledSequence>,
    pub target_test: Vec<LabeledSequence>,
}

enum Unit<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn units(text: &str) -> Vec<Unit<'_>> {
    text.split_whitespace()
        .map(|w| {
            if let Some(name) = w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                Unit::Slot(name)
            } else {
                Unit::Literal(w)
            }
        })
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.spec_version != SPEC_VERSION {
            return fail(format!(
                "unsupported spec_version {:?}, this build understands {SPEC_VERSION:?}",
                self.spec_version
            ));
        }
        if self.templates.is_empty() {
            return fail("at least one template is required".into());
        }
        for (slot, phrases) in &self.fillers {
            if phrases.is_empty() {
                return fail(format!("slot {slot:?} has no filler phrases"));
            }
            if phrases.iter().any(|p| p.split_whitespace().count() == 0) {
                return fail(format!("slot {slot:?} contains an empty phrase"));
            }
        }
        for (i, t) in self.templates.iter().enumerate() {
            let us = units(&t.text);
            if us.is_empty() {
                return fail(format!("template {i} is empty"));
            }
            for u in &us {
                if let Unit::Slot(name) = u {
                    if !self.fillers.contains_key(*name) {
                        return fail(format!(
                            "template {i} references slot {name:?} with no fillers"
                        ));
                    }
                }
            }
            if let Some(order) = &t.target_order {
                let mut seen = vec![false; us.len()];
                let ok = order.len() == us.len()
                    && order.iter().all(|&j| {
                        if j < us.len() && !seen[j] {
                            seen[j] = true;
                            true
                        } else {
                            false
                        }
                    });
                if !ok {
                    return fail(format!(
                        "template {i}: target_order must be a permutation of 0..{}",
                        us.len()
                    ));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng, reordered: bool) -> LabeledSequence {
        let t = &self.templates[rng.gen_range(0..self.templates.len())];
        let us = units(&t.text);
        // phrases drawn in template order so source and target sampling
        // consume the rng identically
        let filled: Vec<(Vec<&str>, Option<String>)> = us
            .iter()
            .map(|u| match u {
                Unit::Literal(w) => (vec![*w], None),
                Unit::Slot(name) => {
                    let phrases = &self.fillers[*name];
                    let phrase = &phrases[rng.gen_range(0..phrases.len())];
                    (
                        phrase.split_whitespace().collect(),
                        Some(name.to_uppercase()),
                    )
                }
            })
            .collect();
        let order: Vec<usize> = if !reordered {
            (0..filled.len()).collect()
        } else if let Some(explicit) = &t.target_order {
            explicit.clone()
        } else {
            match self.target_reorder {
                Reorder::Identity => (0..filled.len()).collect(),
                Reorder::Reverse => (0..filled.len()).rev().collect(),
            }
        };
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        for &idx in &order {
            let (words, kind) = &filled[idx];
            for (wi, w) in words.iter().enumerate() {
                tokens.push(w.to_string());
                labels.push(match kind {
                    None => "O".to_string(),
                    Some(k) if wi == 0 => format!("B-{k}"),
                    Some(k) => format!("I-{k}"),
                });
            }
        }
        LabeledSequence { tokens, labels }
    }

    fn dataset(&self, stream: u64, count: usize, reordered: bool) -> Vec<LabeledSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..count).map(|_| self.sample(&mut rng, reordered)).collect()
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        self.validate()?;
        Ok(SynthCorpus {
            train: self.dataset(0, self.train, false),
            dev: self.dataset(1, self.dev, false),
            test: self.dataset(2, self.test, false),
            target_train: self.dataset(3, self.target_train, true),
            target_test: self.dataset(4, self.target_test, true),
        })
    }

    /// Built-in assistant-command language: five multi-token entity types,
    /// several time-of-day phrases that occur in both orders ("nine pm" and
    /// "pm nine"), and a reversed target side.
    pub fn builtin(seed: u64) -> SynthSpec {
        let mut fillers: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let list = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        fillers.insert(
            "person".into(),
            list(&[
                "maria chen", "alex porter", "sam blake", "fatima noor", "jordan cruz",
                "chen wei", "noor aziz", "dana kim", "leo marsh", "rosa ortiz",
                "omar haddad", "ivy nakamura", "tara singh", "felix mora", "nina petrov",
                "kai tanaka",
            ]),
        );
        fillers.insert(
            "city".into(),
            list(&[
                "new york", "los angeles", "rio de janeiro", "san francisco", "hong kong",
                "kuala lumpur", "cape town", "abu dhabi", "buenos aires", "tel aviv",
                "addis ababa", "san jose", "porto alegre", "santa cruz", "salt lake city",
                "dar es salaam",
            ]),
        );
        // the paired phrases share a token multiset across opposite orders
        fillers.insert(
            "datetime".into(),
            list(&[
                "nine pm", "pm nine", "ten am", "am ten", "five thirty", "thirty five",
                "six fifteen", "fifteen six", "half past nine", "quarter to four",
                "early next week", "late this evening", "tomorrow at noon",
                "friday after lunch", "next monday morning", "the day after",
            ]),
        );
        fillers.insert(
            "weather".into(),
            list(&[
                "light rain", "heavy snow", "strong winds", "dense fog", "clear skies",
                "hail storms", "freezing drizzle", "scattered showers", "high humidity",
                "thunder storms", "morning frost", "gusty winds",
            ]),
        );
        fillers.insert(
            "task".into(),
            list(&[
                "water the plants",
                "buy groceries",
                "send the report",
                "walk the dog",
                "pay the rent",
                "book flights",
                "clean the garage",
                "renew the passport",
                "back up photos",
                "charge the car",
                "call the bank",
                "file the taxes",
            ]),
        );
        let templates = [
            "set an alarm for {datetime} please",
            "remind {person} to {task} at {datetime}",
            "what is the weather in {city} at {datetime}",
            "will there be {weather} in {city} tomorrow",
            "wake {person} up at {datetime}",
            "add {task} to my list",
            "any chance of {weather} in {city} right now",
            "call {person} after the meeting",
            "cancel my alarm at {datetime}",
            "book a table in {city} for {datetime}",
            "schedule {task} with {person} for {datetime}",
            "expect {weather} near {city} by {datetime}",
            "tell {person} the flight lands at {datetime}",
            "is {weather} expected around {city} this weekend",
            "move my meeting with {person} to {datetime}",
            "did {person} finish {task} yesterday",
            "forecast for {city} says {weather} by {datetime}",
            "put {task} on the calendar for {datetime}",
        ]
        .iter()
        .map(|t| Template { text: t.to_string(), target_order: None })
        .collect();
        SynthSpec {
            spec_version: SPEC_VERSION.to_string(),
            seed,
            train: 600,
            dev: 160,
            test: 200,
            target_train: 200,
            target_test: 200,
            target_reorder: Reorder::Reverse,
            fillers,
            templates,
        }
    }
}

pub fn parse_spec(text: &str) -> Result<SynthSpec> {
    let spec: SynthSpec =
        toml::from_str(text).map_err(|e| Error::Config(format!("bad corpus spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}
