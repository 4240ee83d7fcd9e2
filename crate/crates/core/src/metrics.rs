//! Accuracy, confusion counts and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive scores above a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 2·rank over positives, ranks 1-based and averaged over ties;
    // doubled so tied ranks stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, average (i + 1 + j) / 2
        let twice_avg = (i + 1 + j) as u64;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += twice_avg * positives;
        i = j;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// One-vs-rest AUC per class from per-target score rows. `None` where a class
/// has no positives or no negatives.
pub fn per_class_auc(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auc_binary(&s, &l).ok()
        })
        .collect()
}

/// Unweighted mean of the defined per-class AUCs.
pub fn macro_auc(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auc_macro: Option<f64>,
    pub per_class_auc: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_targets: usize,
}

impl EvalReport {
    /// Builds a report from softmax score rows and true labels; predictions
    /// are the arg-max class, lowest index on ties.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty dataset".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::Argument("score and label counts differ".into()));
        }
        let mut confusion = vec![vec![0; classes]; classes];
        for (row, &y) in scores.iter().zip(labels) {
            confusion[y][argmax(row)] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_auc = per_class_auc(scores, labels, classes);
        Ok(EvalReport {
            accuracy: correct as f64 / labels.len() as f64,
            auc_macro: macro_auc(&per_class_auc),
            per_class_auc,
            confusion,
            n_targets: labels.len(),
        })
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
