use serde::{Deserialize, Serialize};

use super::model::ClassifierModel;
use crate::error::Result;
use crate::numkernel::{log_sum_exp, Matrix};

pub const MIN_TEMPERATURE: f64 = 0.05;
pub const MAX_TEMPERATURE: f64 = 20.0;
/// Bracket width on `log T` at which the search stops.
pub const LOG_TEMPERATURE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub temperature: f64,
    /// Set when the validation data could not support a fit and `T = 1` was used.
    pub degenerate: bool,
}

impl Calibration {
    pub const IDENTITY: Calibration = Calibration {
        temperature: 1.0,
        degenerate: true,
    };
}

/// Mean negative log-likelihood of `softmax(logits / T)`.
pub fn temperature_nll(logits: &Matrix, labels: &[usize], temperature: f64) -> f64 {
    let mut total = 0.0;
    let mut scaled = vec![0.0; logits.cols()];
    for (i, &y) in labels.iter().enumerate() {
        for (s, v) in scaled.iter_mut().zip(logits.row(i)) {
            *s = v / temperature;
        }
        total += log_sum_exp(&scaled) - scaled[y];
    }
    total / labels.len() as f64
}

/// Golden-section search on `log T` over `[ln 0.05, ln 20]`.
pub fn calibrate_logits(logits: &Matrix, labels: &[usize]) -> Calibration {
    let mut classes: Vec<usize> = labels.iter().copied().filter(|&y| y < logits.cols()).collect();
    classes.sort_unstable();
    classes.dedup();
    if labels.is_empty() || classes.len() < 2 || logits.rows() != labels.len() {
        log::warn!(
            "temperature calibration skipped: {} validation samples over {} classes",
            labels.len(),
            classes.len()
        );
        return Calibration::IDENTITY;
    }
    let f = |log_t: f64| temperature_nll(logits, labels, log_t.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > LOG_TEMPERATURE_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Calibration {
        temperature: ((a + b) / 2.0).exp(),
        degenerate: false,
    }
}

/// Fits a temperature for `model` on a receiver's validation data.
pub fn calibrate_temperature(
    model: &ClassifierModel,
    features: &Matrix,
    labels: &[usize],
) -> Result<Calibration> {
    if labels.is_empty() {
        return Ok(calibrate_logits(&Matrix::zeros(0, model.n_classes), labels));
    }
    Ok(calibrate_logits(&model.logits(features)?, labels))
}
