use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    /// Fresh state for parameters of the given shapes.
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(learning_rate: f64, params: &[Matrix]) -> Self {
        let shapes: Vec<_> = params.iter().map(Matrix::shape).collect();
        Self::new(learning_rate, &shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Any non-finite gradient aborts before parameters change.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Validation(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {i} at step {} (lr {})",
                    self.step + 1,
                    self.learning_rate
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Matrix::filled(2, 2, 0.3)];
        let mut adam = Adam::for_params(1e-3, &params);
        adam.step(&mut params, &[Matrix::zeros(2, 2)]).unwrap();
        assert_eq!(params[0], Matrix::filled(2, 2, 0.3));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr · 1 / (1 + 1e-8)
        let mut params = vec![Matrix::scalar(0.0)];
        let mut adam = Adam::for_params(0.001, &params);
        adam.step(&mut params, &[Matrix::scalar(1.0)]).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut params = vec![Matrix::scalar(1.0)];
        let mut adam = Adam::for_params(0.01, &params);
        for _ in 0..100 {
            adam.step(&mut params, &[Matrix::scalar(-2.0)]).unwrap();
        }
        assert!(params[0].data()[0] > 1.0);
        assert_eq!(adam.step_count(), 100);
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let mut params = vec![Matrix::scalar(1.0)];
        let mut adam = Adam::for_params(0.01, &params);
        let err = adam.step(&mut params, &[Matrix::scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::Training(_))));
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
