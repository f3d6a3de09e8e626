//! Accuracy measures: Brier score and overall misclassification rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{normal_cdf, normal_pdf, Link};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Brier,
    Omr,
}

/// A metric with its classification threshold (used by OMR only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetric {
    pub kind: MetricKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl AccuracyMetric {
    pub fn brier() -> Self {
        AccuracyMetric { kind: MetricKind::Brier, threshold: 0.5 }
    }

    pub fn omr(threshold: f64) -> Result<Self> {
        let m = AccuracyMetric { kind: MetricKind::Omr, threshold };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("metric.threshold", format!("{} is outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MetricKind::Brier => "brier",
            MetricKind::Omr => "omr",
        }
    }

    /// Prediction 𝒴 for linear predictor `eta`: g(η) for Brier, I{g(η) > c} for OMR.
    #[inline]
    pub fn predict(&self, link: &Link, eta: f64) -> f64 {
        let p = link.g(eta);
        match self.kind {
            MetricKind::Brier => p,
            MetricKind::Omr => (p > self.threshold) as u8 as f64,
        }
    }

    pub fn predict_all(&self, link: &Link, eta: &[f64]) -> Vec<f64> {
        eta.iter().map(|&e| self.predict(link, e)).collect()
    }
}

/// Squared-error loss d(y, 𝒴) = (y − 𝒴)².
#[inline]
pub fn loss(y: f64, yhat: f64) -> f64 {
    (y - yhat) * (y - yhat)
}

/// The same loss written linearly in y: y(1 − 2𝒴) + 𝒴², equal to
/// [`loss`] for y ∈ {0, 1} and valid for fractional imputations.
#[inline]
pub fn linear_loss(y: f64, yhat: f64) -> f64 {
    y * (1.0 - 2.0 * yhat) + yhat * yhat
}

/// Derivative of the weighted Brier score in θ:
/// `N⁻¹ Σ −2 w ġ(θᵀx)(y − g(θᵀx)) x` over labeled rows.
pub fn brier_gradient(x_l: &DMatrix<f64>, y: &[f64], w: &[f64], normalizer: f64, link: &Link, theta: &DVector<f64>) -> DVector<f64> {
    let eta = x_l * theta;
    let mut out = DVector::zeros(x_l.ncols());
    for i in 0..x_l.nrows() {
        let (g, gd) = link.g_gdot(eta[i]);
        out.axpy(-2.0 * w[i] * gd * (y[i] - g), &x_l.row(i).transpose(), 1.0);
    }
    out / normalizer
}

/// Kernel-smoothed OMR surface `N⁻¹ Σ w [y + (1 − 2y) Φ((g(θᵀx) − c)/h)]`.
#[allow(clippy::too_many_arguments)]
pub fn smoothed_omr(x_l: &DMatrix<f64>, y: &[f64], w: &[f64], normalizer: f64, link: &Link, theta: &DVector<f64>, c: f64, h: f64) -> f64 {
    let eta = x_l * theta;
    let mut s = 0.0;
    for i in 0..x_l.nrows() {
        s += w[i] * (y[i] + (1.0 - 2.0 * y[i]) * normal_cdf((link.g(eta[i]) - c) / h));
    }
    s / normalizer
}

/// Gradient of [`smoothed_omr`]: `N⁻¹ Σ w (1 − 2y) ġ K_h(g − c) x` with a Gaussian kernel.
#[allow(clippy::too_many_arguments)]
pub fn omr_gradient(x_l: &DMatrix<f64>, y: &[f64], w: &[f64], normalizer: f64, link: &Link, theta: &DVector<f64>, c: f64, h: f64) -> DVector<f64> {
    let eta = x_l * theta;
    let mut out = DVector::zeros(x_l.ncols());
    for i in 0..x_l.nrows() {
        let (g, gd) = link.g_gdot(eta[i]);
        let k = normal_pdf((g - c) / h) / h;
        out.axpy(w[i] * (1.0 - 2.0 * y[i]) * gd * k, &x_l.row(i).transpose(), 1.0);
    }
    out / normalizer
}

/// Bandwidth h₀ n^(−1/4).
pub fn bandwidth(h0: f64, n: usize) -> f64 {
    h0 * (n as f64).powf(-0.25)
}

/// Metric-specific derivative estimate used in influence functions.
#[allow(clippy::too_many_arguments)]
pub fn metric_gradient(
    metric: &AccuracyMetric,
    x_l: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    normalizer: f64,
    link: &Link,
    theta: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    match metric.kind {
        MetricKind::Brier => brier_gradient(x_l, y, w, normalizer, link, theta),
        MetricKind::Omr => omr_gradient(x_l, y, w, normalizer, link, theta, metric.threshold, h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_matches_squared_loss() {
        for k in 0..=64 {
            let z = k as f64 / 64.0;
            for y in [0.0, 1.0] {
                assert_eq!(linear_loss(y, z), loss(y, z));
            }
        }
    }

    #[test]
    fn strict_threshold() {
        let m = AccuracyMetric::omr(0.5).unwrap();
        assert_eq!(m.predict(&Link::expit(), 0.0), 0.0);
        assert_eq!(m.predict(&Link::expit(), 1e-9), 1.0);
        assert!(AccuracyMetric::omr(1.5).is_err());
        assert!(AccuracyMetric::omr(0.0).is_err());
    }

    #[test]
    fn brier_gradient_zero_at_exact_fit() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
        let theta = DVector::from_vec(vec![0.2, 0.5]);
        let link = Link::expit();
        let y: Vec<f64> = (0..3).map(|i| link.g((x.row(i) * &theta)[0])).collect();
        let g = brier_gradient(&x, &y, &[1.0; 3], 3.0, &link, &theta);
        assert!(g.norm() < 1e-15);
    }
}
