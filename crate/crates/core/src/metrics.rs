//! Ranking and calibration metrics.

use serde::Serialize;

/// Area under the ROC curve, or the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Auc {
    Value { auc: f64 },
    /// Only one class present.
    Degenerate { positives: usize, negatives: usize },
}

impl Auc {
    pub fn value(self) -> Option<f64> {
        match self {
            Auc::Value { auc } => Some(auc),
            Auc::Degenerate { .. } => None,
        }
    }

    /// The value, with a degenerate result mapped to NaN for logging.
    pub fn or_nan(self) -> f64 {
        self.value().unwrap_or(f64::NAN)
    }
}

/// Rank-based AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Auc {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Auc::Degenerate { positives, negatives };
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * pos_in_tie as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Auc::Value {
        auc: (rank_sum - p * (p + 1.0) / 2.0) / (p * n),
    }
}

/// Mean binary cross-entropy from logits.
pub fn logloss_from_logits(logits: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(logits.len(), labels.len(), "logloss: logits and labels differ in length");
    if logits.is_empty() {
        return f64::NAN;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| crate::head::bce_with_logit(z, y))
        .sum();
    total / logits.len() as f64
}

pub fn positive_rate(labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64
}
