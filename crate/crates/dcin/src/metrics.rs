//! Evaluation metrics: AUC via rank statistics and binary log loss.

use crate::error::{Error, Result};
use crate::tape::PRED_CLAMP;

/// How tied prediction pairs count toward AUC. `Strict` follows the
/// indicator literally (ties contribute 0); `Half` credits ties 0.5, the
/// common convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieMode {
    Strict,
    Half,
}

impl TieMode {
    pub fn parse(s: &str) -> Result<TieMode> {
        match s {
            "strict" => Ok(TieMode::Strict),
            "half" => Ok(TieMode::Half),
            other => Err(Error::Config(format!("unknown tie mode {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricResult {
    pub auc: f64,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Probability that a random positive outranks a random negative,
/// computed by grouping sorted predictions in O(N log N). Must match the
/// O(N+ * N-) pairwise definition exactly.
pub fn auc(preds: &[f64], labels: &[u8], tie_mode: TieMode) -> Result<f64> {
    assert_eq!(preds.len(), labels.len(), "preds and labels length mismatch");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined);
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].partial_cmp(&preds[b]).expect("NaN prediction"));

    // Walk groups of equal predictions in ascending order; every positive
    // in a group beats all negatives strictly below it and ties with the
    // negatives inside its group.
    let mut wins = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos = 0usize;
        let mut group_neg = 0usize;
        while j < order.len() && preds[order[j]] == preds[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        wins += group_pos as f64 * neg_below as f64;
        if tie_mode == TieMode::Half {
            wins += 0.5 * group_pos as f64 * group_neg as f64;
        }
        neg_below += group_neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// The quadratic pairwise definition, kept as an independent oracle.
pub fn auc_pairwise(preds: &[f64], labels: &[u8], tie_mode: TieMode) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined);
    }
    let mut wins = 0.0;
    for (pi, &pl) in preds.iter().zip(labels) {
        if pl != 1 {
            continue;
        }
        for (ni, &nl) in preds.iter().zip(labels) {
            if nl == 1 {
                continue;
            }
            if pi > ni {
                wins += 1.0;
            } else if pi == ni && tie_mode == TieMode::Half {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Fraction of positive-negative pairs with exactly equal predictions.
pub fn tie_mass(preds: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined);
    }
    let mut ties = 0.0;
    for (pi, &pl) in preds.iter().zip(labels) {
        if pl != 1 {
            continue;
        }
        for (ni, &nl) in preds.iter().zip(labels) {
            if nl == 0 && pi == ni {
                ties += 1.0;
            }
        }
    }
    Ok(ties / (n_pos as f64 * n_neg as f64))
}

/// Mean negative log-likelihood with the same clamping as the training
/// loss.
pub fn logloss(preds: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "preds and labels length mismatch");
    let mut sum = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let pc = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        sum -= if y == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    sum / preds.len() as f64
}

pub fn evaluate(preds: &[f64], labels: &[u8], tie_mode: TieMode) -> Result<MetricResult> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(MetricResult {
        auc: auc(preds, labels, tie_mode)?,
        logloss: logloss(preds, labels),
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}
