//! Accuracy and rank-based AUROC.
//!
//! AUROC is computed from integer half-pair counts (two per concordant pair,
//! one per tie), so the result is exactly the pairwise statistic rather than an
//! approximation of it.

use std::cmp::Ordering;

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub scores: Vec<f64>,
    pub true_label: usize,
}

impl ScoredPrediction {
    pub fn new(scores: Vec<f64>, true_label: usize) -> Result<Self> {
        if true_label >= scores.len() {
            return Err(Error::ContractViolation(format!(
                "label {true_label} out of range for {} scores",
                scores.len()
            )));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::ContractViolation(format!("scores do not form a probability vector (sum {sum})")));
        }
        Ok(Self { scores, true_label })
    }

    /// Index of the largest score, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

pub fn accuracy(predictions: &[ScoredPrediction]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("accuracy of no predictions"));
    }
    let hits = predictions.iter().filter(|p| p.argmax() == p.true_label).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Rank statistic with ties counted as half a pair. `positive[i]` marks the
/// positive class.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: positive.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::ContractViolation("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u128;
    let n_neg = positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(Ordering::Equal));

    // Sweep groups of equal score from low to high. Each positive beats every
    // negative already passed and ties every negative in its own group.
    let mut half_pairs: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let pos = group.iter().filter(|&&i| positive[i]).count() as u128;
        let neg = group.len() as u128 - pos;
        half_pairs += pos * (2 * neg_below + neg);
        neg_below += neg;
        start = end;
    }
    Ok(half_pairs as f64 / (2 * n_pos * n_neg) as f64)
}

/// Macro-averaged one-versus-rest AUROC over the classes present in the labels.
/// With two classes this is the AUROC of class 1.
pub fn auroc_ovr(predictions: &[ScoredPrediction], num_classes: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("AUROC of no predictions"));
    }
    if let Some(p) = predictions.iter().find(|p| p.scores.len() != num_classes) {
        return Err(Error::DimensionMismatch {
            expected: num_classes,
            got: p.scores.len(),
        });
    }
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| predictions.iter().any(|p| p.true_label == c))
        .collect();
    if present.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "one-versus-rest AUROC needs two classes present, found {}",
            present.len()
        )));
    }
    let per_class = |c: usize| -> Result<f64> {
        let scores: Vec<f64> = predictions.iter().map(|p| p.scores[c]).collect();
        let positive: Vec<bool> = predictions.iter().map(|p| p.true_label == c).collect();
        auroc_binary(&scores, &positive)
    };
    if num_classes == 2 {
        return per_class(1);
    }
    let mut total = 0.0;
    for &c in &present {
        total += per_class(c)?;
    }
    Ok(total / present.len() as f64)
}
