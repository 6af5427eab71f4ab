//! Predictive metrics.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{check_dim, GpError, Result};
use crate::gp::GaussianPredictive;

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Negative mean test log likelihood.
    pub nll: f64,
    pub rmse: Option<f64>,
    pub crps: Option<f64>,
    /// Misclassification rate (classification only).
    pub error: Option<f64>,
}

/// CRPS of `N(mu, sd²)` at `y`.
pub fn crps_gaussian(mu: f64, sd: f64, y: f64) -> f64 {
    let z = (y - mu) / sd;
    let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * z * z).exp();
    sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - INV_SQRT_PI)
}

/// NLL, RMSE and CRPS of Gaussian predictions using the observed variance.
pub fn evaluate_regression(preds: &[GaussianPredictive], y: &[f64]) -> Result<MetricsReport> {
    check_dim(preds.len(), y.len())?;
    if y.is_empty() {
        return Err(GpError::EmptyData);
    }
    let n = y.len() as f64;
    let (mut ll, mut se, mut crps) = (0.0, 0.0, 0.0);
    for (p, &t) in preds.iter().zip(y) {
        if !(p.var_observed > 0.0) {
            return Err(GpError::Domain(format!(
                "non-positive predictive variance {}",
                p.var_observed
            )));
        }
        ll += p.log_density(t);
        se += (t - p.mean) * (t - p.mean);
        crps += crps_gaussian(p.mean, p.var_observed.sqrt(), t).max(0.0);
    }
    Ok(MetricsReport {
        nll: -ll / n,
        rmse: Some((se / n).sqrt()),
        crps: Some(crps / n),
        error: None,
    })
}

/// NLL and error rate from class-probability vectors and true class indices.
pub fn evaluate_classification(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    check_dim(probs.len(), labels.len())?;
    if labels.is_empty() {
        return Err(GpError::EmptyData);
    }
    let n = labels.len() as f64;
    let (mut ll, mut wrong) = (0.0, 0usize);
    for (p, &c) in probs.iter().zip(labels) {
        if c >= p.len() {
            return Err(GpError::Format(format!("class {c} out of range")));
        }
        ll += p[c].max(f64::MIN_POSITIVE).ln();
        if crate::classify::argmax(p) != c {
            wrong += 1;
        }
    }
    Ok(MetricsReport {
        nll: -ll / n,
        rmse: None,
        crps: None,
        error: Some(wrong as f64 / n),
    })
}

/// Binary probabilities `p(+1)` against ±1 labels.
pub fn evaluate_binary(p_pos: &[f64], labels: &[f64]) -> Result<MetricsReport> {
    let probs: Vec<Vec<f64>> = p_pos.iter().map(|&p| vec![1.0 - p, p]).collect();
    let idx: Vec<usize> = labels.iter().map(|&l| usize::from(l > 0.0)).collect();
    evaluate_classification(&probs, &idx)
}
