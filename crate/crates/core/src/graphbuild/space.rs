use serde::{Deserialize, Serialize};

use crate::basepool::ClassifierPool;
use crate::error::{Error, Result};
use crate::numkernel::{argmax, Matrix};

/// Concatenated calibrated probabilities `P` (N × M·C) and meta-labels `Z` (N × M).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionSpace {
    pub probs: Matrix,
    pub meta_labels: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub pool_size: usize,
}

impl DecisionSpace {
    /// Builds `Z` from `probs`: `Z[i, m] = 1` iff block `m` of row `i` peaks at `labels[i]`.
    pub fn new(probs: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if n_classes == 0 || probs.cols() % n_classes != 0 || probs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "decision space",
                left: probs.shape(),
                right: (labels.len(), n_classes),
            });
        }
        let pool_size = probs.cols() / n_classes;
        let meta_labels = meta_labels(&probs, &labels, n_classes);
        Ok(Self {
            probs,
            meta_labels,
            labels,
            n_classes,
            pool_size,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Probability block of model `m` for row `i`.
    pub fn block(&self, i: usize, m: usize) -> &[f64] {
        &self.probs.row(i)[m * self.n_classes..(m + 1) * self.n_classes]
    }

    pub fn correct(&self, i: usize, m: usize) -> bool {
        self.meta_labels.get(i, m) == 1.0
    }
}

pub(crate) fn meta_labels(probs: &Matrix, labels: &[usize], n_classes: usize) -> Matrix {
    let m = probs.cols() / n_classes;
    let mut z = Matrix::zeros(probs.rows(), m);
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        for k in 0..m {
            if argmax(&row[k * n_classes..(k + 1) * n_classes]) == y {
                z.set(i, k, 1.0);
            }
        }
    }
    z
}

/// Calibrated `φ(x)` for every row of `features`.
///
/// `overrides` swaps in precomputed logits for selected global indices, which
/// is how out-of-fold predictions replace a home model's own outputs.
pub fn embed(pool: &ClassifierPool, features: &Matrix, overrides: &[(usize, &Matrix)]) -> Result<Matrix> {
    let m_total = pool.len();
    let c = pool
        .entries
        .first()
        .map(|e| e.model.n_classes)
        .ok_or_else(|| Error::Validation("empty classifier pool".into()))?;
    let mut out = Matrix::zeros(features.rows(), m_total * c);
    for entry in &pool.entries {
        let m = entry.global_index;
        let t = entry.calibration.temperature;
        let probs = match overrides.iter().find(|(g, _)| *g == m) {
            Some((_, logits)) => {
                if logits.shape() != (features.rows(), c) {
                    return Err(Error::Dimension {
                        op: "logit override",
                        left: logits.shape(),
                        right: (features.rows(), c),
                    });
                }
                logits.scale(1.0 / t).softmax_rows()
            }
            None => entry.model.predict_proba(features, t)?,
        };
        for i in 0..features.rows() {
            out.row_mut(i)[m * c..(m + 1) * c].copy_from_slice(probs.row(i));
        }
    }
    Ok(out)
}

/// [`embed`] plus meta-labels.
pub fn project_decision_space(
    pool: &ClassifierPool,
    features: &Matrix,
    labels: &[usize],
    overrides: &[(usize, &Matrix)],
) -> Result<DecisionSpace> {
    let probs = embed(pool, features, overrides)?;
    let c = probs.cols() / pool.len();
    DecisionSpace::new(probs, labels.to_vec(), c)
}
