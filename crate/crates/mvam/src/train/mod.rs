//! Training: BCE objective over sigmoid outputs, Adam updates, and
//! patience-based early stopping on a validation precision-at-n metric.
//!
//! The protocol: shuffle, batch, forward in train mode, backprop, step,
//! evaluate precision-at-n on the validation split after every epoch, and
//! keep the checkpoint of the best epoch. Training halts once the metric
//! has gone `patience` consecutive epochs without a strict improvement
//! (ties do not reset the clock) or at `max_epochs`. A non-finite loss or
//! gradient marks the run as diverged and returns the last good checkpoint.

pub mod adam;

pub use adam::AdamState;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    batch_iter, batch_iter_in_order, Corpus, LabelIndex, Split, Vocabulary, PAD_ID,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_all, MetricsReport, PredictionSet};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

/// Keeps the dropout stream distinct from the shuffle and init streams,
/// which are seeded directly from the config seed.
const DROPOUT_STREAM: u64 = 0x64726f70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Epochs without strict improvement tolerated before stopping.
    pub patience: usize,
    /// Validation precision cutoff driving early stopping.
    pub early_stop_n: usize,
    pub max_epochs: usize,
    /// Precision cutoffs reported per epoch; `early_stop_n` is always
    /// included, cutoffs beyond the label count are dropped.
    pub eval_ns: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            patience: 10,
            early_stop_n: 15,
            max_epochs: 100,
            eval_ns: vec![5, 15],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |details: String| Error::Config(details);
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(bad(format!("{name} {beta} outside [0,1)")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(bad(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(bad("patience must be at least 1".into()));
        }
        if self.early_stop_n == 0 {
            return Err(bad("early_stop_n must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(bad("max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Report cutoffs for a label count: configured cutoffs that fit, plus
    /// the early-stop cutoff, which must fit.
    fn report_ns(&self, num_labels: usize) -> Result<Vec<usize>> {
        if self.early_stop_n > num_labels {
            return Err(Error::Config(format!(
                "early_stop_n {} exceeds the label count {num_labels}",
                self.early_stop_n
            )));
        }
        let mut ns = self.eval_ns.clone();
        ns.push(self.early_stop_n);
        ns.retain(|&n| n >= 1 && n <= num_labels);
        ns.sort_unstable();
        ns.dedup();
        Ok(ns)
    }
}

/// Mean over batch documents of the per-document label-summed binary cross
/// entropy.
pub fn bce_loss(probabilities: &Tensor, truth: &[f64]) -> Result<Tensor> {
    probabilities.binary_cross_entropy(truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    /// This epoch strictly improved on the previous best.
    pub improved: bool,
    /// Training should halt after this epoch.
    pub stop: bool,
}

/// Patience clock over a maximized metric. Only strict improvement resets
/// it; training halts after epoch `best_epoch + patience`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_epoch: Option<usize>,
    best_metric: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best_epoch: None,
            best_metric: f64::NEG_INFINITY,
        }
    }

    /// Feed epoch metrics in increasing epoch order.
    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best_epoch.is_none() || metric > self.best_metric;
        if improved {
            self.best_epoch = Some(epoch);
            self.best_metric = metric;
        }
        let best = self.best_epoch.expect("set on first update");
        StopDecision {
            improved,
            stop: epoch >= best + self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Document-weighted mean training loss over the epoch's batches.
    pub train_loss: f64,
    pub val: MetricsReport,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LogSummary {
    best_epoch: usize,
    stopped_early: bool,
    diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient aborted the run; the
    /// returned checkpoint is then the last good one.
    pub diverged: bool,
}

impl TrainLog {
    /// One JSON record per line: the epoch records in order, then a summary
    /// line.
    pub fn to_lines(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(
                &serde_json::to_string(record)
                    .map_err(|e| Error::json("encoding train log epoch", e))?,
            );
            out.push('\n');
        }
        let summary = LogSummary {
            best_epoch: self.best_epoch,
            stopped_early: self.stopped_early,
            diverged: self.diverged,
        };
        out.push_str(
            &serde_json::to_string(&summary)
                .map_err(|e| Error::json("encoding train log summary", e))?,
        );
        out.push('\n');
        Ok(out)
    }

    pub fn from_lines(text: &str) -> Result<TrainLog> {
        let mut epochs = Vec::new();
        let mut summary: Option<LogSummary> = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if summary.is_some() {
                return Err(Error::invalid(
                    "train log",
                    "records found after the summary line",
                ));
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::json("decoding train log line", e))?;
            if value.get("epoch").is_some() {
                epochs.push(
                    serde_json::from_value(value)
                        .map_err(|e| Error::json("decoding train log epoch", e))?,
                );
            } else {
                summary = Some(
                    serde_json::from_value(value)
                        .map_err(|e| Error::json("decoding train log summary", e))?,
                );
            }
        }
        let summary = summary
            .ok_or_else(|| Error::invalid("train log", "missing summary line"))?;
        Ok(TrainLog {
            epochs,
            best_epoch: summary.best_epoch,
            stopped_early: summary.stopped_early,
            diverged: summary.diverged,
        })
    }

    /// Equality over everything except wall-clock fields.
    pub fn same_outcome(&self, other: &TrainLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
            && self.diverged == other.diverged
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val == b.val
            })
    }
}

/// Fills the config's corpus-dependent sentinels (`num_labels`,
/// `vocab_size` left at 0) and cross-checks explicit values.
pub fn resolve_model_config(
    mut config: ModelConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
) -> Result<ModelConfig> {
    if config.num_labels == 0 {
        config.num_labels = corpus.num_labels;
    } else if config.num_labels != corpus.num_labels {
        return Err(Error::Config(format!(
            "config expects {} labels, corpus has {}",
            config.num_labels, corpus.num_labels
        )));
    }
    if config.vocab_size == 0 {
        config.vocab_size = vocab.len();
    } else if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "config expects vocabulary size {}, actual vocabulary has {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    Ok(config)
}

/// Forward pass in eval mode over one split in corpus order, then all
/// metrics. The per-document probabilities do not depend on the batch
/// size, so `batch_size` only controls memory.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    n_list: &[usize],
) -> Result<MetricsReport> {
    if corpus.num_labels != model.config.num_labels {
        return Err(Error::Config(format!(
            "model has {} labels, corpus has {}",
            model.config.num_labels, corpus.num_labels
        )));
    }
    let mut probs = Vec::new();
    let mut truth = Vec::new();
    let mut docs = 0usize;
    // Eval mode draws nothing from the RNG; fixed seed for determinism.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batch_iter_in_order(corpus, batch_size, split)? {
        let slices = batch.token_slices();
        let out = model.forward(&slices, PAD_ID, false, &mut rng)?;
        probs.extend(out.probabilities.data());
        truth.extend_from_slice(&batch.labels);
        docs += batch.rows();
    }
    if docs == 0 {
        return Err(Error::invalid("evaluate", format!("split {split} is empty")));
    }
    let pred = PredictionSet::new(probs, truth, docs, model.config.num_labels)?;
    evaluate_all(&pred, n_list)
}

/// Rejects evaluation under a vocabulary other than the one the checkpoint
/// was trained with.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    vocab: &Vocabulary,
    split: Split,
    batch_size: usize,
    n_list: &[usize],
) -> Result<MetricsReport> {
    let actual = vocab.sha256_hex();
    if ckpt.vocab_sha256 != actual {
        return Err(Error::invalid(
            "evaluate_checkpoint",
            format!(
                "vocabulary hash mismatch: checkpoint {}.., corpus {}..",
                &ckpt.vocab_sha256[..ckpt.vocab_sha256.len().min(12)],
                &actual[..12]
            ),
        ));
    }
    evaluate_model(&ckpt.model, corpus, split, batch_size, n_list)
}

/// Errors that can only arise from numerically exploded parameters: with
/// finite weights and validated batches, every softmax row has at least one
/// unmasked position and a denominator of at least 1.
fn is_numeric_blowup(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::FullyMaskedRow { .. })
}

pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    labels: &LabelIndex,
    pretrained: Option<&[f64]>,
) -> Result<(Checkpoint, TrainLog)> {
    train_config.validate()?;
    let model_config = resolve_model_config(model_config.clone(), corpus, vocab)?;
    if labels.len() != corpus.num_labels {
        return Err(Error::Config(format!(
            "label index has {} entries, corpus declares {}",
            labels.len(),
            corpus.num_labels
        )));
    }
    if corpus.split_docs(Split::Train).next().is_none()
        || corpus.split_docs(Split::Val).next().is_none()
    {
        return Err(Error::Config(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let ns = train_config.report_ns(model_config.num_labels)?;

    let model = Model::init(model_config, pretrained, train_config.seed)?;
    let trainable = model.params.trainable();
    let mut adam = AdamState::new(&trainable);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ DROPOUT_STREAM);
    let mut stopper = EarlyStopping::new(train_config.patience);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        diverged: false,
    };
    let snapshot = |m: &Model| {
        Checkpoint::snapshot(m, vocab.sha256_hex(), labels.names().to_vec())
    };
    // Last-good fallback if the very first epoch diverges.
    let mut best = snapshot(&model)?;

    'epochs: for epoch in 0..train_config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut docs_seen = 0usize;
        let shuffle_seed = train_config.seed.wrapping_add(epoch as u64);
        for batch in batch_iter(corpus, train_config.batch_size, shuffle_seed, Split::Train)? {
            let slices = batch.token_slices();
            let out = match model.forward(&slices, PAD_ID, true, &mut dropout_rng) {
                Ok(out) => out,
                Err(e) if is_numeric_blowup(&e) => {
                    log.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let loss = bce_loss(&out.probabilities, &batch.labels)?;
            let value = loss.data()[0];
            if !value.is_finite() {
                log.diverged = true;
                break 'epochs;
            }
            loss_sum += value * batch.rows() as f64;
            docs_seen += batch.rows();
            loss.backward()?;
            match adam.step(&trainable, train_config) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => {
                    log.diverged = true;
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
            model.params.zero_grads();
        }
        let train_loss = loss_sum / docs_seen as f64;
        let val = match evaluate_model(&model, corpus, Split::Val, train_config.batch_size, &ns) {
            Ok(val) => val,
            Err(e) if is_numeric_blowup(&e) => {
                log.diverged = true;
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let metric = val
            .p_at(train_config.early_stop_n)
            .expect("report cutoffs include the early-stop one");
        let decision = stopper.update(epoch, metric);
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if decision.improved {
            best = snapshot(&model)?;
        }
        if decision.stop {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = stopper.best_epoch().unwrap_or(0);
    Ok((best, log))
}
