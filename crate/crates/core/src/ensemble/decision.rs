use serde::{Deserialize, Serialize};

use super::metrics::effective_ensemble_size;
use crate::numkernel::sigmoid_scalar;

/// Selection threshold on competence scores; selection is strict.
pub const SELECTION_THRESHOLD: f64 = 0.5;

/// Competence scores turned into normalized voting weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub scores: Vec<f64>,
    pub selected: Vec<bool>,
    pub weights: Vec<f64>,
    pub fallback: bool,
}

impl Selection {
    /// Classifiers taking part in the vote; `M` on fallback.
    pub fn size(&self) -> usize {
        if self.fallback {
            self.weights.len()
        } else {
            self.selected.iter().filter(|&&s| s).count()
        }
    }

    pub fn ess(&self) -> f64 {
        effective_ensemble_size(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub query: usize,
    pub selection: Selection,
    pub label: usize,
    pub vote_mass: Vec<f64>,
}

/// `q = σ(s)`; keep `q > 0.5`, weight by `q` renormalized; uniform `1/M`
/// when nothing clears the threshold.
pub fn decide(logits: &[f64]) -> Selection {
    let scores: Vec<f64> = logits.iter().map(|&s| sigmoid_scalar(s)).collect();
    let selected: Vec<bool> = scores.iter().map(|&q| q > SELECTION_THRESHOLD).collect();
    let total: f64 = scores
        .iter()
        .zip(&selected)
        .filter(|(_, &s)| s)
        .map(|(q, _)| q)
        .sum();
    let fallback = !selected.iter().any(|&s| s);
    let weights = if fallback {
        vec![1.0 / scores.len() as f64; scores.len()]
    } else {
        scores
            .iter()
            .zip(&selected)
            .map(|(&q, &s)| if s { q / total } else { 0.0 })
            .collect()
    };
    Selection {
        scores,
        selected,
        weights,
        fallback,
    }
}

/// Weighted hard vote: mass per class, winner with ties to the smaller class.
pub fn vote(weights: &[f64], predictions: &[usize], n_classes: usize) -> (usize, Vec<f64>) {
    let mut mass = vec![0.0; n_classes];
    for (&w, &p) in weights.iter().zip(predictions) {
        mass[p] += w;
    }
    let mut best = 0;
    for c in 1..n_classes {
        if mass[c] > mass[best] {
            best = c;
        }
    }
    (best, mass)
}

/// Uniform vote over all predictions.
pub fn uniform_vote(predictions: &[usize], n_classes: usize) -> usize {
    let w = vec![1.0 / predictions.len() as f64; predictions.len()];
    vote(&w, predictions, n_classes).0
}

pub fn decide_and_vote(query: usize, logits: &[f64], predictions: &[usize], n_classes: usize) -> EnsembleDecision {
    let selection = decide(logits);
    let (label, vote_mass) = vote(&selection.weights, predictions, n_classes);
    EnsembleDecision {
        query,
        selection,
        label,
        vote_mass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_confident_classifier() {
        let s = decide(&[2.0, -2.0, -2.0]);
        assert_eq!(s.selected, vec![true, false, false]);
        assert_eq!(s.weights, vec![1.0, 0.0, 0.0]);
        assert!(!s.fallback);
        assert_eq!(s.size(), 1);
    }

    #[test]
    fn boundary_scores_fall_back() {
        let s = decide(&[0.0, 0.0, 0.0, 0.0]);
        assert!(s.fallback);
        assert_eq!(s.weights, vec![0.25; 4]);
        assert_eq!(s.size(), 4);
    }

    #[test]
    fn weights_by_hand() {
        let s = decide(&[1.0, 0.5, -3.0]);
        let q0 = 1.0 / (1.0 + (-1.0f64).exp());
        let q1 = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((s.scores[0] - 0.731).abs() < 1e-3 && (s.scores[1] - 0.622).abs() < 1e-3);
        assert!((s.scores[2] - 0.047).abs() < 1e-3);
        assert!((s.weights[0] - q0 / (q0 + q1)).abs() < 1e-12);
        assert!((s.weights[0] - 0.540).abs() < 1e-3 && (s.weights[1] - 0.460).abs() < 1e-3);
        assert_eq!(s.weights[2], 0.0);
    }

    #[test]
    fn votes() {
        let (label, mass) = vote(&[0.6, 0.4], &[2, 1], 3);
        assert_eq!((label, mass), (2, vec![0.0, 0.4, 0.6]));
        let (label, mass) = vote(&[0.5, 0.5], &[1, 1], 3);
        assert_eq!((label, mass.iter().sum::<f64>()), (1, 1.0));
        assert_eq!(vote(&[0.5, 0.5], &[2, 0], 3).0, 0);
        assert_eq!(uniform_vote(&[2, 1, 2], 3), 2);
    }

    #[test]
    fn fallback_vote_is_the_uniform_vote() {
        let preds = [1, 2, 2, 1, 0];
        let d = decide_and_vote(0, &[-1.0; 5], &preds, 3);
        assert!(d.selection.fallback);
        assert_eq!(d.label, uniform_vote(&preds, 3));
    }
}
