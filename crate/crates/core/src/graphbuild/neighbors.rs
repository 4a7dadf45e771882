use serde::{Deserialize, Serialize};

use super::space::DecisionSpace;

/// Added to class stabilities before inverting them.
pub const STABILITY_EPSILON: f64 = 1e-8;
/// Probability floor inside the log-loss tie-break.
pub const LOG_LOSS_FLOOR: f64 = 1e-15;
/// Added after shifting selected gains to be nonnegative.
pub const GAIN_SHIFT_FLOOR: f64 = 1e-6;

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Nearest candidates of one class, closest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassNeighbors {
    pub class: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

/// A weighted class-balanced neighborhood of one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub classes: Vec<ClassNeighbors>,
    /// `d̄_c`, aligned with `classes`.
    pub stability: Vec<f64>,
    /// `π_c`, aligned with `classes`.
    pub class_mass: Vec<f64>,
    /// Per-neighbor weights, aligned with `classes[c].indices`.
    pub weights: Vec<Vec<f64>>,
}

impl Neighborhood {
    /// `(candidate index, weight)` pairs in class order.
    pub fn flat(&self) -> Vec<(usize, f64)> {
        self.classes
            .iter()
            .zip(&self.weights)
            .flat_map(|(cn, w)| cn.indices.iter().copied().zip(w.iter().copied()))
            .collect()
    }
}

/// Up to `k` nearest rows of `points` per class among `candidates`, by L1
/// distance to `target`; ties go to the smaller index. `exclude` is skipped.
/// Classes with no candidates are omitted.
pub fn class_balanced_neighbors(
    points: &DecisionSpace,
    candidates: &[usize],
    target: &[f64],
    exclude: Option<usize>,
    k: usize,
) -> Vec<ClassNeighbors> {
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); points.n_classes];
    for &i in candidates {
        if Some(i) == exclude {
            continue;
        }
        per_class[points.labels[i]].push((l1_distance(points.probs.row(i), target), i));
    }
    per_class
        .into_iter()
        .enumerate()
        .filter(|(_, list)| !list.is_empty())
        .map(|(class, mut list)| {
            list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            list.truncate(k);
            ClassNeighbors {
                class,
                indices: list.iter().map(|p| p.1).collect(),
                distances: list.iter().map(|p| p.0).collect(),
            }
        })
        .collect()
}

/// Mean L1 distance from `target` to the running means of the first
/// `r = 1..=k'` neighbors (given closest first).
pub fn cmdw_stability(neighbors: &[&[f64]], target: &[f64]) -> f64 {
    if neighbors.is_empty() {
        return 0.0;
    }
    let mut mean = vec![0.0; target.len()];
    let mut total = 0.0;
    for (r, x) in neighbors.iter().enumerate() {
        let n = (r + 1) as f64;
        for (mu, v) in mean.iter_mut().zip(x.iter()) {
            *mu += (v - *mu) / n;
        }
        total += l1_distance(&mean, target);
    }
    total / neighbors.len() as f64
}

/// Class masses `π_c ∝ 1/(d̄_c + ε)` spread within each class by
/// `softmax(-distance)`. Returns `(π, weights per class)`.
pub fn hierarchical_weights(stability: &[f64], distances: &[Vec<f64>], epsilon: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let inv: Vec<f64> = stability.iter().map(|d| 1.0 / (d + epsilon)).collect();
    let total: f64 = inv.iter().sum();
    let mass: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let weights = distances
        .iter()
        .zip(&mass)
        .map(|(dist, &pi)| {
            let neg: Vec<f64> = dist.iter().map(|d| -d).collect();
            crate::numkernel::softmax(&neg).into_iter().map(|s| pi * s).collect()
        })
        .collect();
    (mass, weights)
}

/// Complete weighted neighborhood of `target` among `candidates`.
pub fn weighted_neighborhood(
    points: &DecisionSpace,
    candidates: &[usize],
    target: &[f64],
    exclude: Option<usize>,
    k: usize,
    epsilon: f64,
) -> Neighborhood {
    let classes = class_balanced_neighbors(points, candidates, target, exclude, k);
    let stability: Vec<f64> = classes
        .iter()
        .map(|cn| {
            let rows: Vec<&[f64]> = cn.indices.iter().map(|&i| points.probs.row(i)).collect();
            cmdw_stability(&rows, target)
        })
        .collect();
    let distances: Vec<Vec<f64>> = classes.iter().map(|cn| cn.distances.clone()).collect();
    let (class_mass, weights) = hierarchical_weights(&stability, &distances, epsilon);
    Neighborhood {
        classes,
        stability,
        class_mass,
        weights,
    }
}

/// Pool-relative gain and weighted log-loss for every classifier.
///
/// `G_m = Σ_i w_i (Z[i, m] − mean_m' Z[i, m'])`;
/// `L_m = Σ_i w_i · −ln max(p_m(y_i | x_i), 1e-15)`.
pub fn gain_scores(points: &DecisionSpace, neighbors: &[(usize, f64)]) -> (Vec<f64>, Vec<f64>) {
    let m_total = points.pool_size;
    let mut gain = vec![0.0; m_total];
    let mut loss = vec![0.0; m_total];
    for &(i, w) in neighbors {
        let z = points.meta_labels.row(i);
        let pool_mean = z.iter().sum::<f64>() / m_total as f64;
        let y = points.labels[i];
        for m in 0..m_total {
            gain[m] += w * (z[m] - pool_mean);
            let p = points.block(i, m)[y].max(LOG_LOSS_FLOOR);
            loss[m] -= w * p.ln();
        }
    }
    (gain, loss)
}

/// Top `k` classifiers by (gain desc, loss asc, index asc) with weights
/// `(G − min selected G + 1e-6)` normalized to sum to one.
pub fn top_classifiers(gain: &[f64], loss: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..gain.len()).collect();
    order.sort_by(|&a, &b| {
        gain[b]
            .total_cmp(&gain[a])
            .then(loss[a].total_cmp(&loss[b]))
            .then(a.cmp(&b))
    });
    order.truncate(k.min(gain.len()));
    let floor = order.iter().map(|&m| gain[m]).fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = order.iter().map(|&m| gain[m] - floor + GAIN_SHIFT_FLOOR).collect();
    let total: f64 = shifted.iter().sum();
    order.into_iter().zip(shifted).map(|(m, s)| (m, s / total)).collect()
}
