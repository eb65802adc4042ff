//! Brute-force reference implementations used to cross-check the crate's
//! metrics. Everything here works on plain slices and enumerates pairs or
//! candidates directly, trading speed for obviousness.

#![allow(dead_code)] // each integration test binary uses a subset

/// Probability that a random positive outscores a random negative, by direct
/// enumeration of every positive-negative pair; ties credit one half. `None`
/// when either class is missing. All partial sums are half-integers, so the
/// result is exact in f64.
pub fn pair_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len());
    let mut credit = 0.0;
    let mut pairs = 0u64;
    for (i, &positive) in truth.iter().enumerate() {
        if !positive {
            continue;
        }
        for (j, &other) in truth.iter().enumerate() {
            if other {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    (pairs > 0).then(|| credit / pairs as f64)
}

/// Sorted-ascending summation. Macro averages in the crate add per-label
/// values in value order (its label-order-invariance convention), so the
/// reference must sum in the same order for means to be bitwise comparable.
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut values = values.to_vec();
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fnn: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fnn;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Per-label confusion counts, binarizing at `threshold` (>= is positive).
/// Walks label-major where the crate walks doc-major; counts are integers, so
/// any order agrees exactly.
pub fn count_confusions(
    probs: &[f64],
    truth: &[bool],
    docs: usize,
    labels: usize,
    threshold: f64,
) -> Vec<Counts> {
    (0..labels)
        .map(|l| {
            let mut c = Counts { tp: 0, fp: 0, fnn: 0 };
            for d in 0..docs {
                let hit = probs[d * labels + l] >= threshold;
                match (hit, truth[d * labels + l]) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fnn += 1,
                    (false, false) => {}
                }
            }
            c
        })
        .collect()
}

pub fn pooled_f1(counts: &[Counts]) -> f64 {
    let total = counts.iter().fold(Counts { tp: 0, fp: 0, fnn: 0 }, |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fnn: acc.fnn + c.fnn,
    });
    total.f1()
}

pub fn mean_f1(counts: &[Counts]) -> f64 {
    let values: Vec<f64> = counts.iter().map(Counts::f1).collect();
    sorted_sum(&values) / counts.len() as f64
}

/// Pair-enumeration AUC over the flattened matrix.
pub fn pooled_auc(probs: &[f64], truth: &[bool]) -> Option<f64> {
    pair_auc(probs, truth)
}

/// Mean of per-label pair AUCs over labels with both classes present.
pub fn mean_auc(probs: &[f64], truth: &[bool], docs: usize, labels: usize) -> Option<f64> {
    let mut values = Vec::new();
    for l in 0..labels {
        let col_scores: Vec<f64> = (0..docs).map(|d| probs[d * labels + l]).collect();
        let col_truth: Vec<bool> = (0..docs).map(|d| truth[d * labels + l]).collect();
        if let Some(auc) = pair_auc(&col_scores, &col_truth) {
            values.push(auc);
        }
    }
    (!values.is_empty()).then(|| sorted_sum(&values) / values.len() as f64)
}

/// Precision at n by repeated max extraction (score descending, index
/// ascending on ties) instead of a full sort.
pub fn top_n_precision(
    probs: &[f64],
    truth: &[bool],
    docs: usize,
    labels: usize,
    n: usize,
) -> f64 {
    assert!(n >= 1 && n <= labels);
    let mut total = 0.0;
    for d in 0..docs {
        let row = &probs[d * labels..(d + 1) * labels];
        let mut taken = vec![false; labels];
        let mut hits = 0u64;
        for _ in 0..n {
            let mut best: Option<usize> = None;
            for (l, &p) in row.iter().enumerate() {
                if taken[l] {
                    continue;
                }
                // Strict > keeps the lowest index among equal scores.
                if best.is_none_or(|b| p > row[b]) {
                    best = Some(l);
                }
            }
            let pick = best.expect("n <= labels");
            taken[pick] = true;
            if truth[d * labels + pick] {
                hits += 1;
            }
        }
        total += hits as f64 / n as f64;
    }
    total / docs as f64
}
