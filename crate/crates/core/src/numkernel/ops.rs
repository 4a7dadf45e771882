//! Value-level activations and losses. The tape in [`super::autodiff`]
//! records the same functions with their derivatives.

use super::Matrix;
use crate::error::{Error, Result};

/// Logistic function, evaluated on the branch that never overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable binary cross-entropy on a logit: `max(s,0) - s·z + log(1 + exp(-|s|))`.
#[inline]
pub fn bce_logit_scalar(s: f64, z: f64) -> f64 {
    s.max(0.0) - s * z + (-s.abs()).exp().ln_1p()
}

#[inline]
pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

/// Mean binary cross-entropy with logits over every entry.
pub fn bce_with_logits(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    validate_binary_targets(logits, targets)?;
    let n = logits.data().len().max(1) as f64;
    Ok(logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &z)| bce_logit_scalar(s, z))
        .sum::<f64>()
        / n)
}

pub(crate) fn validate_binary_targets(logits: &Matrix, targets: &Matrix) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::Dimension {
            op: "bce_with_logits",
            left: logits.shape(),
            right: targets.shape(),
        });
    }
    if let Some(bad) = targets.data().iter().find(|&&z| z != 0.0 && z != 1.0) {
        return Err(Error::Validation(format!(
            "binary cross-entropy target {bad} is not 0 or 1"
        )));
    }
    Ok(())
}
