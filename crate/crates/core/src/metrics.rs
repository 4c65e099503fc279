//! Binary classification metrics: AUC by average ranks (ties get half
//! credit), log loss, and accuracy at the 0.5 threshold.

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted 0.5. Computed by the average-rank formula.
pub fn compute_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores must align");
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    // average rank over tied score groups (ranks are 1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy (scores clamped into `[1e-12, 1 - 1e-12]`) and
/// accuracy; a score of exactly 0.5 counts as a positive prediction.
pub fn compute_logloss_acc(labels: &[u8], scores: &[f64]) -> (f64, f64) {
    assert_eq!(labels.len(), scores.len(), "labels and scores must align");
    assert!(!labels.is_empty(), "metrics need at least one sample");
    let mut logloss = 0.0;
    let mut correct = 0usize;
    for (&label, &score) in labels.iter().zip(scores) {
        let p = score.clamp(1e-12, 1.0 - 1e-12);
        logloss -= if label == 1 { p.ln() } else { (1.0 - p).ln() };
        let predicted = u8::from(score >= 0.5);
        if predicted == label {
            correct += 1;
        }
    }
    (logloss / labels.len() as f64, correct as f64 / labels.len() as f64)
}
