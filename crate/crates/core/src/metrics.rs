//! Binary classification metrics.

use crate::error::{shape_err, Error, Result};

pub const DECISION_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(shape_err("labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("metric of an empty set".into()));
    }
    Ok(())
}

pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| u8::from(s > DECISION_THRESHOLD) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// F1 of the positive class at threshold 0.5. Defined as 0 when there are no true
/// positives (including the degenerate no-positive case).
pub fn f1_score(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > DECISION_THRESHOLD, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// ROC AUC via the rank-sum statistic with midranks for ties. Returns 0.5 when only one
/// class is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(0.5);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
