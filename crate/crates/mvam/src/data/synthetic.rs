//! Synthetic corpus generator with planted token-label structure.
//!
//! Every label owns a disjoint set of trigger tokens that no other label and
//! no noise position ever emits, so a document's label set is (nearly)
//! decodable from its tokens: labels fire at configured base rates, optional
//! co-occurrence rules switch one label on conditioned on another, and each
//! active label emits each of its triggers independently with the configured
//! probability. The rest of the document is uniform noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, LabelIndex, Split, Vocabulary};
use crate::error::{Error, Result};

/// When label `when` is active, label `then` is switched on with
/// probability `prob`. Rules apply in order, so later rules see earlier
/// activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceRule {
    pub when: usize,
    pub then: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Non-reserved token count: trigger tokens plus the noise pool.
    pub vocab_size: usize,
    pub num_labels: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    /// Bounds for the per-document length budget that sizes the noise fill.
    pub min_len: usize,
    pub max_len: usize,
    pub triggers_per_label: usize,
    /// Per-label probability that an active label emits each of its
    /// triggers; a single entry broadcasts to every label. A label with
    /// probability 0 leaves no direct token evidence, so its signal lives
    /// entirely in co-occurrence.
    pub trigger_probs: Vec<f64>,
    /// Per-label marginal activation rates; a single entry broadcasts to
    /// every label.
    pub base_rates: Vec<f64>,
    pub cooccurrence: Vec<CooccurrenceRule>,
    /// Fraction of the length budget filled with noise tokens.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: 600,
            num_labels: 30,
            train_docs: 5000,
            val_docs: 500,
            test_docs: 500,
            min_len: 30,
            max_len: 120,
            triggers_per_label: 2,
            trigger_probs: vec![0.95],
            base_rates: vec![0.12],
            cooccurrence: Vec::new(),
            noise_rate: 0.9,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn trigger_count(&self) -> usize {
        self.num_labels * self.triggers_per_label
    }

    fn expand_per_label(&self, name: &str, values: &[f64]) -> Result<Vec<f64>> {
        let expanded = match values.len() {
            0 => {
                return Err(Error::invalid(
                    "synthetic spec",
                    format!("{name} is empty"),
                ));
            }
            1 => vec![values[0]; self.num_labels],
            n if n == self.num_labels => values.to_vec(),
            n => {
                return Err(Error::invalid(
                    "synthetic spec",
                    format!("{name} has {n} entries for {} labels", self.num_labels),
                ));
            }
        };
        if let Some(bad) = expanded.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "synthetic spec",
                format!("{name} entry {bad} outside [0,1]"),
            ));
        }
        Ok(expanded)
    }

    fn expanded_base_rates(&self) -> Result<Vec<f64>> {
        self.expand_per_label("base_rates", &self.base_rates)
    }

    fn expanded_trigger_probs(&self) -> Result<Vec<f64>> {
        self.expand_per_label("trigger_probs", &self.trigger_probs)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |details: String| Error::invalid("synthetic spec", details);
        if self.num_labels == 0 {
            return Err(invalid("num_labels must be at least 1".into()));
        }
        if self.triggers_per_label == 0 {
            return Err(invalid("triggers_per_label must be at least 1".into()));
        }
        if self.trigger_count() >= self.vocab_size {
            return Err(invalid(format!(
                "{} trigger tokens exceed the vocabulary budget of {} (a non-empty noise pool is required)",
                self.trigger_count(),
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(invalid(format!(
                "length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(invalid(format!(
                "noise_rate {} outside [0,1]",
                self.noise_rate
            )));
        }
        if self.train_docs + self.val_docs + self.test_docs == 0 {
            return Err(invalid("no documents requested".into()));
        }
        for rule in &self.cooccurrence {
            if rule.when >= self.num_labels || rule.then >= self.num_labels {
                return Err(invalid(format!(
                    "co-occurrence rule {} -> {} references a label out of range",
                    rule.when, rule.then
                )));
            }
            if rule.when == rule.then {
                return Err(invalid(format!(
                    "co-occurrence rule {} -> {} is a self-loop",
                    rule.when, rule.then
                )));
            }
            if !(0.0..=1.0).contains(&rule.prob) {
                return Err(invalid(format!(
                    "co-occurrence probability {} outside [0,1]",
                    rule.prob
                )));
            }
        }
        self.expanded_base_rates()?;
        self.expanded_trigger_probs().map(|_| ())
    }
}

fn decimal_width(n: usize) -> usize {
    n.max(1).to_string().len().max(2)
}

/// Vocabulary id of trigger j of label l: triggers occupy the first ids
/// after the reserved entries, grouped by label.
fn trigger_id(spec: &SyntheticSpec, label: usize, j: usize) -> usize {
    2 + label * spec.triggers_per_label + j
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, Vocabulary, LabelIndex)> {
    spec.validate()?;
    let rates = spec.expanded_base_rates()?;
    let trigger_probs = spec.expanded_trigger_probs()?;
    let lw = decimal_width(spec.num_labels);
    let tw = decimal_width(spec.triggers_per_label);
    let noise_pool = spec.vocab_size - spec.trigger_count();
    let nw = decimal_width(noise_pool);

    let mut tokens = Vec::with_capacity(spec.vocab_size);
    for l in 0..spec.num_labels {
        for j in 0..spec.triggers_per_label {
            tokens.push(format!("t{l:0lw$}_{j:0tw$}"));
        }
    }
    for i in 0..noise_pool {
        tokens.push(format!("w{i:0nw$}"));
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    let labels =
        LabelIndex::from_names((0..spec.num_labels).map(|l| format!("label_{l:0lw$}")))?;
    // Zero-padded names sort numerically, so label id l is literally l.
    debug_assert_eq!(labels.id_of(&format!("label_{:0lw$}", 0)), Some(0));

    let noise_start = 2 + spec.trigger_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut documents =
        Vec::with_capacity(spec.train_docs + spec.val_docs + spec.test_docs);
    let plan = [
        (Split::Train, spec.train_docs),
        (Split::Val, spec.val_docs),
        (Split::Test, spec.test_docs),
    ];
    let mut counter = 0usize;
    for (split, count) in plan {
        for _ in 0..count {
            let mut active = vec![false; spec.num_labels];
            for (l, rate) in rates.iter().enumerate() {
                if rng.gen_bool(*rate) {
                    active[l] = true;
                }
            }
            for rule in &spec.cooccurrence {
                if active[rule.when] && rng.gen_bool(rule.prob) {
                    active[rule.then] = true;
                }
            }
            let budget = rng.gen_range(spec.min_len..=spec.max_len);
            let mut doc_tokens: Vec<usize> = Vec::new();
            for l in 0..spec.num_labels {
                if !active[l] {
                    continue;
                }
                for j in 0..spec.triggers_per_label {
                    if rng.gen_bool(trigger_probs[l]) {
                        doc_tokens.push(trigger_id(spec, l, j));
                    }
                }
            }
            let noise_count = (budget as f64 * spec.noise_rate).round() as usize;
            for _ in 0..noise_count {
                doc_tokens.push(noise_start + rng.gen_range(0..noise_pool));
            }
            if doc_tokens.is_empty() {
                // Documents must carry at least one token.
                doc_tokens.push(noise_start + rng.gen_range(0..noise_pool));
            }
            doc_tokens.shuffle(&mut rng);
            let label_ids: Vec<usize> = (0..spec.num_labels).filter(|&l| active[l]).collect();
            documents.push(Document {
                id: format!("doc_{counter:06}"),
                tokens: doc_tokens,
                labels: label_ids,
                split,
            });
            counter += 1;
        }
    }
    Ok((
        Corpus { documents, num_labels: spec.num_labels },
        vocab,
        labels,
    ))
}
