//! Multi-label evaluation: micro/macro F1, micro/macro ROC AUC, and
//! precision-at-n.
//!
//! Macro averages use value-canonical summation, so every macro metric is
//! bitwise invariant under label reordering. AUC is the Mann-Whitney rank
//! statistic (ties count one half), computed from average ranks; micro mode
//! pools every (document, label) decision, macro mode averages per-label
//! values over labels that have both classes present, skipping degenerate
//! ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::canonical_sum;

/// A documents x labels probability matrix paired with binary truth.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    probabilities: Vec<f64>,
    truth: Vec<bool>,
    docs: usize,
    labels: usize,
    threshold: f64,
}

impl PredictionSet {
    /// `probabilities` and `truth` are row-major docs x labels; probabilities
    /// must lie in [0,1] and truth entries must be exactly 0 or 1.
    pub fn new(
        probabilities: Vec<f64>,
        truth: Vec<f64>,
        docs: usize,
        labels: usize,
    ) -> Result<PredictionSet> {
        if docs == 0 || labels == 0 {
            return Err(Error::Metrics("empty prediction matrix".into()));
        }
        if probabilities.len() != docs * labels || truth.len() != docs * labels {
            return Err(Error::Metrics(format!(
                "expected {docs}x{labels} matrices, got {} probabilities and {} truth entries",
                probabilities.len(),
                truth.len()
            )));
        }
        if let Some(bad) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Metrics(format!(
                "probability {bad} outside [0,1]"
            )));
        }
        let truth_bits = truth
            .iter()
            .map(|&y| match y {
                y if y == 0.0 => Ok(false),
                y if y == 1.0 => Ok(true),
                other => Err(Error::Metrics(format!("truth entry {other} is not 0/1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(PredictionSet {
            probabilities,
            truth: truth_bits,
            docs,
            labels,
            threshold: 0.5,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<PredictionSet> {
        if !threshold.is_finite() {
            return Err(Error::Metrics(format!("threshold {threshold} not finite")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    fn prob(&self, doc: usize, label: usize) -> f64 {
        self.probabilities[doc * self.labels + label]
    }

    fn is_true(&self, doc: usize, label: usize) -> bool {
        self.truth[doc * self.labels + label]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl Confusion {
    /// 2TP / (2TP + FP + FN), with the empty-counts case pinned to 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }
}

/// Per-label counts after binarizing at the set's threshold (>= is positive).
pub fn confusion_counts(pred: &PredictionSet) -> Vec<Confusion> {
    let mut counts = vec![Confusion::default(); pred.labels];
    for doc in 0..pred.docs {
        for (label, c) in counts.iter_mut().enumerate() {
            let hit = pred.prob(doc, label) >= pred.threshold;
            match (hit, pred.is_true(doc, label)) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

/// Counts pooled across labels before the F1 quotient.
pub fn micro_f1(counts: &[Confusion]) -> f64 {
    let pooled = counts.iter().fold(Confusion::default(), |acc, c| Confusion {
        true_pos: acc.true_pos + c.true_pos,
        false_pos: acc.false_pos + c.false_pos,
        false_neg: acc.false_neg + c.false_neg,
    });
    pooled.f1()
}

/// Unweighted mean of per-label F1 over every label; labels that never occur
/// and are never predicted contribute 0.
pub fn macro_f1(counts: &[Confusion]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut values: Vec<f64> = counts.iter().map(Confusion::f1).collect();
    canonical_sum(&mut values) / counts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AucMode {
    Micro,
    Macro,
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed through average ranks, which agrees with
/// direct pair enumeration exactly (all intermediate sums are half-integers
/// far below the f64 integer limit).
fn rank_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let pos = positives.iter().filter(|&&t| t).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Tie groups share the average of the ranks they span (IEEE equality,
        // so -0.0 and 0.0 tie even though total_cmp orders them apart).
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positives[idx] {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

pub fn roc_auc(pred: &PredictionSet, mode: AucMode) -> Result<f64> {
    match mode {
        AucMode::Micro => rank_auc(&pred.probabilities, &pred.truth).ok_or_else(|| {
            Error::Metrics("micro AUC needs at least one positive and one negative".into())
        }),
        AucMode::Macro => {
            let mut values = Vec::with_capacity(pred.labels);
            let mut skipped = 0usize;
            let mut col_scores = vec![0.0; pred.docs];
            let mut col_truth = vec![false; pred.docs];
            for label in 0..pred.labels {
                for doc in 0..pred.docs {
                    col_scores[doc] = pred.prob(doc, label);
                    col_truth[doc] = pred.is_true(doc, label);
                }
                match rank_auc(&col_scores, &col_truth) {
                    Some(auc) => values.push(auc),
                    None => skipped += 1,
                }
            }
            if values.is_empty() {
                return Err(Error::Metrics(format!(
                    "macro AUC undefined: all {skipped} labels are single-class"
                )));
            }
            let n = values.len() as f64;
            Ok(canonical_sum(&mut values) / n)
        }
    }
}

/// Mean over documents of the fraction of the n top-scored labels present in
/// the truth. Score ties pick the lower label index first.
pub fn precision_at_n(pred: &PredictionSet, n: usize) -> Result<f64> {
    if n == 0 || n > pred.labels {
        return Err(Error::Metrics(format!(
            "precision_at_n needs 1 <= n <= {}, got {n}",
            pred.labels
        )));
    }
    let mut order: Vec<usize> = (0..pred.labels).collect();
    let mut total = 0.0;
    for doc in 0..pred.docs {
        order.sort_by(|&a, &b| {
            pred.prob(doc, b)
                .total_cmp(&pred.prob(doc, a))
                .then(a.cmp(&b))
        });
        let hits = order[..n]
            .iter()
            .filter(|&&label| pred.is_true(doc, label))
            .count();
        total += hits as f64 / n as f64;
    }
    Ok(total / pred.docs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// (n, value), ascending in n.
    pub p_at_n: Vec<(usize, f64)>,
    /// Per-label confusion counts; empty on reports parsed back from text.
    #[serde(default)]
    pub per_label: Vec<Confusion>,
}

impl MetricsReport {
    pub fn p_at(&self, n: usize) -> Option<f64> {
        self.p_at_n.iter().find(|(m, _)| *m == n).map(|(_, v)| *v)
    }

    /// Flat `name value` lines, one metric per line, 4 fractional digits.
    pub fn format_record(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("macro_auc {:.4}\n", self.macro_auc));
        out.push_str(&format!("micro_auc {:.4}\n", self.micro_auc));
        out.push_str(&format!("macro_f1 {:.4}\n", self.macro_f1));
        out.push_str(&format!("micro_f1 {:.4}\n", self.micro_f1));
        for (n, v) in &self.p_at_n {
            out.push_str(&format!("p_at_{n} {v:.4}\n"));
        }
        out
    }

    pub fn parse_record(text: &str) -> Result<MetricsReport> {
        let mut report = MetricsReport {
            macro_auc: f64::NAN,
            micro_auc: f64::NAN,
            macro_f1: f64::NAN,
            micro_f1: f64::NAN,
            p_at_n: Vec::new(),
            per_label: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, value) = line.split_once(' ').ok_or_else(|| {
                Error::Metrics(format!("metrics record line {}: no value", lineno + 1))
            })?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::Metrics(format!("metrics record line {}: bad number", lineno + 1))
            })?;
            match name {
                "macro_auc" => report.macro_auc = value,
                "micro_auc" => report.micro_auc = value,
                "macro_f1" => report.macro_f1 = value,
                "micro_f1" => report.micro_f1 = value,
                _ => {
                    let n: usize = name
                        .strip_prefix("p_at_")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| {
                            Error::Metrics(format!(
                                "metrics record line {}: unknown metric {name}",
                                lineno + 1
                            ))
                        })?;
                    report.p_at_n.push((n, value));
                }
            }
        }
        for (name, v) in [
            ("macro_auc", report.macro_auc),
            ("micro_auc", report.micro_auc),
            ("macro_f1", report.macro_f1),
            ("micro_f1", report.micro_f1),
        ] {
            if v.is_nan() {
                return Err(Error::Metrics(format!("metrics record missing {name}")));
            }
        }
        Ok(report)
    }
}

/// All metrics on one prediction set. `n_list` picks the precision cutoffs.
pub fn evaluate_all(pred: &PredictionSet, n_list: &[usize]) -> Result<MetricsReport> {
    let counts = confusion_counts(pred);
    let mut p_at_n = Vec::with_capacity(n_list.len());
    for &n in n_list {
        p_at_n.push((n, precision_at_n(pred, n)?));
    }
    p_at_n.sort_unstable_by_key(|&(n, _)| n);
    Ok(MetricsReport {
        macro_auc: roc_auc(pred, AucMode::Macro)?,
        micro_auc: roc_auc(pred, AucMode::Micro)?,
        macro_f1: macro_f1(&counts),
        micro_f1: micro_f1(&counts),
        p_at_n,
        per_label: counts,
    })
}
