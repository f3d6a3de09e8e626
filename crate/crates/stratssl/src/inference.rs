//! Perturbation resampling for accuracy estimates and the influence-based
//! covariance of the combined θ estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::estimators::{augmented_values, plug_in_value, ImputationFit, Problem, SslFit};
use crate::link::normal_quantile;
use crate::linalg::select_rows;
use crate::metric::AccuracyMetric;
use crate::rng::stream_rng;
use crate::solver::ser_dvector;

/// n⁻¹ Σ 𝒵_i 𝒵_iᵀ with 𝒵_i = Ŵ𝒲_i + (I − Ŵ)𝒱_i for diagonal Ŵ.
pub fn theta_ssl_covariance(cw: &DMatrix<f64>, cv: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let n = cw.nrows();
    let mut z = cw.clone();
    for j in 0..cw.ncols() {
        let mut c = z.column_mut(j);
        c.scale_mut(weights[j]);
        c.axpy(1.0 - weights[j], &cv.column(j), 1.0);
    }
    crate::linalg::weighted_crossprod(&z, &vec![1.0; n]) / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDistribution {
    /// Exp(1).
    #[default]
    Exponential,
    /// 0 or 2 with equal probability.
    TwoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    #[default]
    Normal,
    /// Percentiles of the replicate deviations, added to the point estimate.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub replicates: usize,
    pub distribution: WeightDistribution,
    pub seed: u64,
    pub level: f64,
    pub interval: IntervalKind,
    /// Keep per-replicate values in the summary.
    pub keep_replicates: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            replicates: 500,
            distribution: WeightDistribution::Exponential,
            seed: 0,
            level: 0.95,
            interval: IntervalKind::Normal,
            keep_replicates: false,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::validation("perturbation.replicates", "must be at least 2"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::validation("perturbation.level", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Draws `n` perturbation weights for replicate `b`.
    pub fn draw(&self, n: usize, b: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, b as u64);
        match self.distribution {
            WeightDistribution::Exponential => (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
            WeightDistribution::TwoPoint => (0..n).map(|_| if rng.random::<bool>() { 2.0 } else { 0.0 }).collect(),
        }
    }
}

/// Quantities fixed across replicates.
pub struct PerturbationBase<'a> {
    pub problem: &'a Problem,
    pub ssl: &'a SslFit,
    pub imputation: &'a ImputationFit,
    pub metric: AccuracyMetric,
    a_inv: DMatrix<f64>,
    xl: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> PerturbationBase<'a> {
    /// `imputation` must be the augmentation at the combined θ̂.
    pub fn new(problem: &'a Problem, ssl: &'a SslFit, imputation: &'a ImputationFit, metric: AccuracyMetric) -> Result<Self> {
        let a_inv = problem.a_hat_inverse(&ssl.theta.coefficients)?;
        let members = &problem.design.members;
        Ok(PerturbationBase {
            problem,
            ssl,
            imputation,
            metric,
            a_inv,
            xl: select_rows(&problem.x, members),
            y: problem.outcomes_at(members),
            w: problem.design.member_weights(),
        })
    }
}

/// One perturbed refit.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbedFit {
    #[serde(serialize_with = "ser_dvector")]
    pub theta: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub gamma: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub nu: DVector<f64>,
    pub value: f64,
}

/// θ̂* by the one-step update, then γ̃* and ν̃* re-solved under weights wG,
/// and D̂* by the plug-in sum. `g` holds one weight per labeled unit.
pub fn perturb_once(base: &PerturbationBase<'_>, g: &[f64]) -> Result<PerturbedFit> {
    let problem = base.problem;
    let ssl = base.ssl;
    let n = base.w.len();
    if g.len() != n {
        return Err(Error::validation("perturbation weights", format!("expected {n}, got {}", g.len())));
    }
    let weights = ssl.theta.combination_weights.as_ref().expect("combined fit");
    let sum_w: f64 = base.w.iter().sum();
    let p1 = base.xl.ncols();
    let mut u = DVector::zeros(p1);
    for k in 0..n {
        let c = base.w[k] * (g[k] - 1.0) / sum_w;
        if c == 0.0 {
            continue;
        }
        for j in 0..p1 {
            let xj = base.xl[(k, j)];
            u[j] += c * (xj * base.y[k] - weights[j] * xj * ssl.cv_pred_gamma[k] - (1.0 - weights[j]) * xj * ssl.cv_pred_theta[k]);
        }
    }
    let theta = &ssl.theta.coefficients + &base.a_inv * u;

    let wg: Vec<f64> = base.w.iter().zip(g).map(|(a, b)| a * b).collect();
    let normalizer = problem.normalizer() * (wg.iter().sum::<f64>() / sum_w);
    let members = &problem.design.members;
    let gamma = problem.solve_gamma(members, &wg, normalizer, problem.lambda(), Some(&base.imputation.gamma))?.coefficients;
    let eta_gamma = problem.eta(&problem.phi, &gamma);
    let eta_theta = problem.eta(&problem.x, &theta);
    let yhat = base.metric.predict_all(&problem.link, &eta_theta);
    let aug = problem.augment(members, &wg, normalizer, &eta_gamma, &yhat, Some(&base.imputation.nu))?;
    let nu = aug.outcome.coefficients;
    let m = augmented_values(&problem.link, &eta_gamma, &yhat, &nu);
    Ok(PerturbedFit { theta, gamma, nu, value: plug_in_value(&m, &yhat) })
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationSummary {
    pub metric: AccuracyMetric,
    pub replicates: usize,
    pub failures: usize,
    pub se: f64,
    pub ci: (f64, f64),
    pub center: f64,
    pub interval: IntervalKind,
    pub values: Option<Vec<f64>>,
    pub warnings: Vec<Warning>,
}

/// Sample standard deviation.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Runs B perturbations and summarizes them around `center` (normally the
/// ensemble estimate).
pub fn resample_se(base: &PerturbationBase<'_>, center: f64, cfg: &PerturbationConfig) -> Result<PerturbationSummary> {
    cfg.validate()?;
    let n = base.w.len();
    let results: Vec<Result<f64>> =
        (0..cfg.replicates).into_par_iter().map(|b| perturb_once(base, &cfg.draw(n, b)).map(|f| f.value)).collect();
    summarize(base.metric, base.imputation_value(), center, results, cfg)
}

impl PerturbationBase<'_> {
    fn imputation_value(&self) -> f64 {
        plug_in_value(&self.imputation.augmented, &self.imputation.yhat)
    }
}

fn summarize(
    metric: AccuracyMetric,
    apparent: f64,
    center: f64,
    results: Vec<Result<f64>>,
    cfg: &PerturbationConfig,
) -> Result<PerturbationSummary> {
    let mut values = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => values.push(v),
            Err(e) => warnings.push(Warning::ReplicateFailed { replicate: b, reason: e.to_string() }),
        }
    }
    let failures = cfg.replicates - values.len();
    if values.len() * 2 < cfg.replicates || values.len() < 2 {
        return Err(Error::TooManyFailures { failed: failures, total: cfg.replicates });
    }
    let se = sample_sd(&values);
    let alpha = 1.0 - cfg.level;
    let ci = match cfg.interval {
        IntervalKind::Normal => {
            let z = normal_quantile(1.0 - alpha / 2.0);
            (center - z * se, center + z * se)
        }
        IntervalKind::Percentile => {
            let mut dev: Vec<f64> = values.iter().map(|v| v - apparent).collect();
            dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = crate::basis::quantile_sorted(&dev, alpha / 2.0);
            let hi = crate::basis::quantile_sorted(&dev, 1.0 - alpha / 2.0);
            (center + lo, center + hi)
        }
    };
    Ok(PerturbationSummary {
        metric,
        replicates: cfg.replicates,
        failures,
        se,
        ci,
        center,
        interval: cfg.interval,
        values: cfg.keep_replicates.then_some(values),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_replicates_give_point_interval() {
        let cfg = PerturbationConfig { replicates: 4, ..Default::default() };
        let s = summarize(AccuracyMetric::brier(), 0.2, 0.2, (0..4).map(|_| Ok(0.2)).collect(), &cfg).unwrap();
        assert_eq!(s.se, 0.0);
        assert_eq!(s.ci, (0.2, 0.2));
    }

    #[test]
    fn too_many_failures() {
        let cfg = PerturbationConfig { replicates: 4, ..Default::default() };
        let res = vec![Ok(0.1), Err(Error::AllZeroVariance), Err(Error::AllZeroVariance), Err(Error::AllZeroVariance)];
        assert!(matches!(summarize(AccuracyMetric::brier(), 0.1, 0.1, res, &cfg), Err(Error::TooManyFailures { failed: 3, total: 4 })));
    }

    #[test]
    fn weights_have_unit_mean_and_variance() {
        for dist in [WeightDistribution::Exponential, WeightDistribution::TwoPoint] {
            let cfg = PerturbationConfig { distribution: dist, ..Default::default() };
            let g = cfg.draw(200_000, 0);
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let v = g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g.len() as f64;
            assert!((m - 1.0).abs() < 0.01 && (v - 1.0).abs() < 0.02, "{dist:?}: {m} {v}");
        }
    }
}
