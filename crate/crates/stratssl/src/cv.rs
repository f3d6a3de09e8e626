//! Stratified K-fold cross-validation and the ensemble bias correction.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::estimators::{
    augmented_values, column_means, fit_dr, plug_in_value, AccuracyEstimate, Flavor, Problem, Variant,
};
use crate::linalg::select_rows;
use crate::metric::{loss, AccuracyMetric};
use crate::rng::stream_rng;
use crate::solver::{default_ridge, tilt_factors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub replications: usize,
    pub within_stratum: bool,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 6, replications: 20, within_stratum: true, seed: 0 }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::validation("cv.folds", "must be at least 2"));
        }
        if self.replications < 1 {
            return Err(Error::validation("cv.replications", "must be at least 1"));
        }
        Ok(())
    }
}

/// ω = K/(2K − 1).
pub fn ensemble_weight(folds: usize) -> f64 {
    folds as f64 / (2 * folds - 1) as f64
}

/// Splits `units` into K folds. Within-stratum mode shuffles each stratum and
/// deals its units round-robin, so per-stratum fold sizes differ by at most
/// one. `strata` is indexed by unit.
pub fn partition(units: &[usize], strata: &[usize], cfg: &CvConfig, replication: usize) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let k = cfg.folds;
    let mut rng = stream_rng(cfg.seed, replication as u64);
    let mut folds = vec![Vec::new(); k];
    if cfg.within_stratum {
        let num_strata = units.iter().map(|&i| strata[i]).max().unwrap_or(0);
        for s in 1..=num_strata {
            let mut members: Vec<usize> = units.iter().cloned().filter(|&i| strata[i] == s).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < k {
                return Err(Error::TooFewLabeled { stratum: s, count: members.len(), folds: k });
            }
            members.shuffle(&mut rng);
            for (j, i) in members.into_iter().enumerate() {
                folds[j % k].push(i);
            }
        }
    } else {
        if units.len() < k {
            return Err(Error::TooFewLabeled { stratum: 0, count: units.len(), folds: k });
        }
        let mut members = units.to_vec();
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            folds[j % k].push(i);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Density-ratio pieces of a fold fit.
#[derive(Debug, Clone)]
pub struct FoldDr {
    pub theta: DVector<f64>,
    /// exp(αᵀφ) for the held-out units.
    pub fold_tilt: Vec<f64>,
}

/// Training-set fits for one held-out fold.
#[derive(Debug, Clone)]
pub struct FoldFit {
    /// Held-out units, increasing.
    pub units: Vec<usize>,
    /// N_s/n_{s,k} for the held-out units.
    pub fold_weights: Vec<f64>,
    pub gamma: Option<DVector<f64>>,
    pub theta_sl: DVector<f64>,
    /// γ̃₍₋k₎ᵀΦ over all units (empty when not fitted).
    pub eta_gamma: Vec<f64>,
    /// θ̂₍₋k₎ᵀx over all units.
    pub eta_theta: Vec<f64>,
    pub dr: Option<FoldDr>,
    pub retried: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicationFits {
    pub replication: usize,
    pub folds: Vec<FoldFit>,
}

/// Which training fits a CV run needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvNeeds {
    pub ssl: bool,
    pub dr: bool,
}

impl Default for CvNeeds {
    fn default() -> Self {
        CvNeeds { ssl: true, dr: false }
    }
}

/// Fits on `train` and prepares evaluation on `fold`.
#[allow(clippy::too_many_arguments)]
pub fn fit_fold(
    problem: &Problem,
    train: &[usize],
    fold: &[usize],
    sl_ridge: f64,
    gamma_ridge: f64,
    needs: CvNeeds,
    dr_mean: Option<&DVector<f64>>,
) -> Result<FoldFit> {
    let td = problem.subset_design(train)?;
    let fd = problem.subset_design(fold)?;
    let theta_sl = problem.solve_sl(&td, sl_ridge)?.coefficients;
    let eta_theta = problem.eta(&problem.x, &theta_sl);
    let (gamma, eta_gamma) = if needs.ssl {
        let g = problem.solve_gamma(&td.members, &td.member_weights(), problem.normalizer(), gamma_ridge, None)?.coefficients;
        let e = problem.eta(&problem.phi, &g);
        (Some(g), e)
    } else {
        (None, Vec::new())
    };
    let dr = if needs.dr {
        let owned;
        let mean = match dr_mean {
            Some(m) => m,
            None => {
                owned = column_means(problem.dr_basis());
                &owned
            }
        };
        let fit = fit_dr(problem, &td, mean, gamma_ridge)?;
        let (fold_tilt, _) = tilt_factors(&select_rows(problem.dr_basis(), &fd.members), &fit.alpha);
        Some(FoldDr { theta: fit.theta, fold_tilt })
    } else {
        None
    };
    Ok(FoldFit { units: fd.members.clone(), fold_weights: fd.member_weights(), gamma, theta_sl, eta_gamma, eta_theta, dr, retried: false })
}

/// Fits every fold of replication `r`. A failing fold is retried once with
/// ridge max(2λ, default λ) on all of its solves.
pub fn fit_replication(problem: &Problem, cfg: &CvConfig, r: usize, needs: CvNeeds, dr_mean: Option<&DVector<f64>>) -> Result<ReplicationFits> {
    let folds = partition(&problem.labeled, &problem.design.unit_stratum, cfg, r)?;
    let lambda = problem.lambda();
    let retry_ridge = (2.0 * lambda).max(default_ridge(problem.x.ncols() - 1, problem.n()));
    let mut fits = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let train: Vec<usize> = folds.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, f)| f.iter().cloned()).collect();
        let mut train = train;
        train.sort_unstable();
        let fit = match fit_fold(problem, &train, fold, 0.0, lambda, needs, dr_mean) {
            Ok(f) => f,
            Err(e) if e.is_numerical() => {
                let mut f = fit_fold(problem, &train, fold, retry_ridge, retry_ridge, needs, dr_mean)?;
                f.retried = true;
                f
            }
            Err(e) => return Err(e),
        };
        fits.push(fit);
    }
    Ok(ReplicationFits { replication: r, folds: fits })
}

/// All replications of a CV run.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub folds: usize,
    pub replications: Vec<ReplicationFits>,
    pub warnings: Vec<Warning>,
}

impl CvRun {
    /// The first surviving replication; its partition also drives the
    /// combination covariance.
    pub fn primary(&self) -> Option<&ReplicationFits> {
        self.replications.first()
    }
}

/// Fits R replications in parallel. Replications whose folds fail after the
/// retry are dropped with a warning.
pub fn run_cv(problem: &Problem, cfg: &CvConfig, needs: CvNeeds) -> Result<CvRun> {
    cfg.validate()?;
    // partition errors are structural: surface them before fitting
    partition(&problem.labeled, &problem.design.unit_stratum, cfg, 0)?;
    let dr_mean = needs.dr.then(|| column_means(problem.dr_basis()));
    let results: Vec<Result<ReplicationFits>> =
        (0..cfg.replications).into_par_iter().map(|r| fit_replication(problem, cfg, r, needs, dr_mean.as_ref())).collect();
    let mut replications = Vec::new();
    let mut warnings = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(fits) => {
                for (k, f) in fits.folds.iter().enumerate() {
                    if f.retried {
                        warnings.push(Warning::FoldRetried { replication: r, fold: k });
                    }
                }
                replications.push(fits);
            }
            Err(e) => warnings.push(Warning::ReplicationDropped { replication: r, reason: e.to_string() }),
        }
    }
    if replications.is_empty() {
        return Err(Error::TooManyFailures { failed: cfg.replications, total: cfg.replications });
    }
    Ok(CvRun { folds: cfg.folds, replications, warnings })
}

/// Held-out estimate D̂_k for one fold.
pub fn fold_value(problem: &Problem, fold: &FoldFit, metric: &AccuracyMetric, variant: Variant) -> Result<f64> {
    let link = &problem.link;
    let big_n = problem.normalizer();
    match variant {
        Variant::Sl => {
            let s: f64 = fold
                .units
                .iter()
                .zip(&fold.fold_weights)
                .map(|(&i, &w)| w * loss(problem.y_unit[i], metric.predict(link, fold.eta_theta[i])))
                .sum();
            Ok(s / big_n)
        }
        Variant::Ssl => {
            if fold.gamma.is_none() {
                return Err(Error::validation("cv", "semi-supervised fold fits were not requested"));
            }
            let yhat = metric.predict_all(link, &fold.eta_theta);
            let aug = problem.augment(&fold.units, &fold.fold_weights, big_n, &fold.eta_gamma, &yhat, None)?;
            let m = augmented_values(link, &fold.eta_gamma, &yhat, &aug.outcome.coefficients);
            Ok(plug_in_value(&m, &yhat))
        }
        Variant::Dr => {
            let dr = fold.dr.as_ref().ok_or_else(|| Error::validation("cv", "density-ratio fold fits were not requested"))?;
            let mut num = 0.0;
            let mut den = 0.0;
            for (k, &i) in fold.units.iter().enumerate() {
                let tw = fold.fold_weights[k] * dr.fold_tilt[k];
                let e = (problem.x.row(i) * &dr.theta)[0];
                num += tw * loss(problem.y_unit[i], metric.predict(link, e));
                den += tw;
            }
            Ok(num / den)
        }
        Variant::Intrinsic => Err(Error::validation("variant", "cross-validation is not defined for the intrinsic estimator")),
    }
}

/// Per-replication CV values and dropped replications.
#[derive(Debug, Clone, Serialize)]
pub struct CvDiagnostics {
    pub folds: usize,
    pub replication_values: Vec<f64>,
    pub first_replication_folds: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// Averages fold values within each replication, then across replications.
pub fn cv_estimate(problem: &Problem, run: &CvRun, metric: &AccuracyMetric, variant: Variant) -> Result<(AccuracyEstimate, CvDiagnostics)> {
    let per_rep: Vec<(usize, Result<Vec<f64>>)> = run
        .replications
        .iter()
        .map(|rep| (rep.replication, rep.folds.iter().map(|f| fold_value(problem, f, metric, variant)).collect()))
        .collect();
    let mut values = Vec::new();
    let mut first = Vec::new();
    let mut dropped = Vec::new();
    for (r, res) in per_rep {
        match res {
            Ok(v) => {
                if first.is_empty() {
                    first = v.clone();
                }
                values.push(v.iter().sum::<f64>() / v.len() as f64);
            }
            Err(_) => dropped.push(r),
        }
    }
    if values.is_empty() {
        return Err(Error::TooManyFailures { failed: dropped.len(), total: dropped.len() });
    }
    let value = values.iter().sum::<f64>() / values.len() as f64;
    let est = AccuracyEstimate { metric: *metric, variant, flavor: Flavor::Cv, value, se: None, ci: None, influence: None };
    Ok((est, CvDiagnostics { folds: run.folds, replication_values: values, first_replication_folds: first, dropped }))
}

/// Cross-validated estimate for one metric and variant.
pub fn cv_accuracy(problem: &Problem, metric: &AccuracyMetric, variant: Variant, cfg: &CvConfig) -> Result<(AccuracyEstimate, CvDiagnostics)> {
    let needs = CvNeeds { ssl: variant == Variant::Ssl, dr: variant == Variant::Dr };
    let run = run_cv(problem, cfg, needs)?;
    cv_estimate(problem, &run, metric, variant)
}

/// ωD̂ + (1 − ω)D̂^cv with ω = K/(2K − 1).
pub fn ensemble(apparent: &AccuracyEstimate, cv: &AccuracyEstimate, folds: usize) -> Result<AccuracyEstimate> {
    if apparent.variant != cv.variant || apparent.metric != cv.metric {
        return Err(Error::VariantMismatch(format!(
            "{}/{} vs {}/{}",
            apparent.variant.name(),
            apparent.metric.name(),
            cv.variant.name(),
            cv.metric.name()
        )));
    }
    if apparent.flavor != Flavor::Apparent || cv.flavor != Flavor::Cv {
        return Err(Error::VariantMismatch("expected an apparent and a cross-validated estimate".into()));
    }
    let w = ensemble_weight(folds);
    Ok(AccuracyEstimate {
        metric: apparent.metric,
        variant: apparent.variant,
        flavor: Flavor::Ensemble,
        value: w * apparent.value + (1.0 - w) * cv.value,
        se: apparent.se,
        ci: None,
        influence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pigeonhole_sizes() {
        let strata: Vec<usize> = (0..18).map(|i| if i < 10 { 1 } else { 2 }).collect();
        let units: Vec<usize> = (0..18).collect();
        let cfg = CvConfig { folds: 3, ..Default::default() };
        let folds = partition(&units, &strata, &cfg, 0).unwrap();
        let s1: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| strata[i] == 1).count()).collect();
        let s2: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| strata[i] == 2).count()).collect();
        assert_eq!(s1, vec![4, 3, 3]);
        assert_eq!(s2, vec![3, 3, 2]);
    }

    #[test]
    fn too_few_labeled() {
        let strata = vec![1, 1, 2, 2, 2, 2];
        let cfg = CvConfig { folds: 3, ..Default::default() };
        assert!(matches!(partition(&[0, 1, 2, 3, 4, 5], &strata, &cfg, 0), Err(Error::TooFewLabeled { stratum: 1, .. })));
    }

    #[test]
    fn omega_values() {
        assert_eq!(ensemble_weight(6), 6.0 / 11.0);
        assert_eq!(ensemble_weight(3), 3.0 / 5.0);
    }
}
