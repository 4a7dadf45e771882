use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which per-client score a run reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BalancedAccuracy,
}

impl Metric {
    pub fn score(self, predictions: &[usize], labels: &[usize]) -> f64 {
        match self {
            Metric::Accuracy => accuracy(predictions, labels),
            Metric::BalancedAccuracy => balanced_accuracy(predictions, labels),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::BalancedAccuracy => "balanced_accuracy",
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

/// Unweighted mean of recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let recall = per_class_recall(predictions, labels, n_classes);
    let present: Vec<f64> = recall.into_iter().flatten().collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Recall per class; `None` for classes absent from `labels`.
pub fn per_class_recall(predictions: &[usize], labels: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y < n_classes {
            totals[y] += 1;
            hits[y] += usize::from(p == y);
        }
    }
    hits.iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percentage of clients where `method` strictly beats `local`.
pub fn win_rate(method: &[f64], local: &[f64]) -> Result<f64> {
    if method.len() != local.len() {
        return Err(Error::Validation(format!(
            "win rate over mismatched client sets: {} vs {}",
            method.len(),
            local.len()
        )));
    }
    if method.is_empty() {
        return Err(Error::Validation("win rate over zero clients".into()));
    }
    let wins = method.iter().zip(local).filter(|(m, l)| m > l).count();
    Ok(100.0 * wins as f64 / method.len() as f64)
}

/// Inverse Simpson index `1 / Σ w²` of a normalized weight vector.
pub fn effective_ensemble_size(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq > 0.0 {
        1.0 / sum_sq
    } else {
        0.0
    }
}

/// Spearman rank correlation with average ranks for ties.
/// `None` when either side has zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn win_rate_examples() {
        let local = [0.5, 0.6, 0.7, 0.8];
        assert_eq!(win_rate(&local, &local).unwrap(), 0.0);
        assert_eq!(win_rate(&[0.9, 0.9, 0.9, 0.9], &local).unwrap(), 100.0);
        assert_eq!(win_rate(&[0.6, 0.7, 0.8, 0.7], &local).unwrap(), 75.0);
        assert!(win_rate(&[0.1], &local).is_err());
    }

    #[test]
    fn ess_examples() {
        assert!((effective_ensemble_size(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(effective_ensemble_size(&[1.0, 0.0]), 1.0);
        assert!((effective_ensemble_size(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), None);
        // ties get the mean rank: ranks x = [1.5, 1.5, 3], y = [1, 2, 3]
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_ignores_absent_classes() {
        let labels = [0, 0, 0, 2];
        let preds = [0, 0, 1, 1];
        assert!((balanced_accuracy(&preds, &labels) - (2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(accuracy(&preds, &labels), 0.5);
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
