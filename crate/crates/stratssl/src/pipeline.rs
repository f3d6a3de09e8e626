//! End-to-end analysis of one dataset: θ fits, accuracy estimates in every
//! flavor, and perturbation inference.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{expand, BasisSpec};
use crate::cv::{ensemble, run_cv, CvConfig, CvDiagnostics, CvNeeds};
use crate::data::{uniform_design, SamplingDesign, SemiSupervisedDataset};
use crate::error::{Error, Result, Warning};
use crate::estimators::{
    estimate_accuracy_dr, estimate_accuracy_intrinsic, estimate_accuracy_sl, estimate_accuracy_ssl, fit_intrinsic_theta,
    fit_theta_dr, fit_theta_sl, fit_theta_ssl, AccuracyEstimate, Flavor, ImputationFit, IntrinsicThetaFit, Problem, RidgeRule, ThetaChoice,
    ThetaFit, Variant,
};
use crate::inference::{resample_se, PerturbationBase, PerturbationConfig, PerturbationSummary};
use crate::link::{normal_quantile, Link, LinkKind};
use crate::metric::AccuracyMetric;
use crate::solver::SolverConfig;

/// Which weights the labeled units carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// N_s / n_s within each stratum.
    #[default]
    Stratified,
    /// N / n for every labeled unit.
    Uniform,
}

/// Optional estimator families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSet {
    pub ssl: bool,
    pub dr: bool,
    pub intrinsic: bool,
    /// Cross-validated and ensemble flavors.
    pub cross_validated: bool,
    /// Directions e for intrinsic θ fits; unit vectors over every coordinate
    /// when empty.
    pub intrinsic_directions: Vec<Vec<f64>>,
}

impl Default for EstimatorSet {
    fn default() -> Self {
        EstimatorSet { ssl: true, dr: false, intrinsic: false, cross_validated: true, intrinsic_directions: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub basis: BasisSpec,
    /// Density-ratio basis; the imputation basis when absent.
    pub dr_basis: Option<BasisSpec>,
    pub link: LinkKind,
    pub solver: SolverConfig,
    pub ridge: RidgeRule,
    pub design: DesignKind,
    pub metrics: Vec<AccuracyMetric>,
    pub cv: CvConfig,
    pub perturbation: Option<PerturbationConfig>,
    pub estimators: EstimatorSet,
    pub theta_choice: ThetaChoice,
    /// Kernel bandwidth constant h₀ in h = h₀ n^(−1/4).
    pub bandwidth: f64,
    /// Level of the influence-based intervals for the supervised estimates.
    pub level: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            basis: BasisSpec::linear(),
            dr_basis: None,
            link: LinkKind::Expit,
            solver: SolverConfig::default(),
            ridge: RidgeRule::Simulation,
            design: DesignKind::Stratified,
            metrics: vec![AccuracyMetric::brier(), AccuracyMetric { kind: crate::metric::MetricKind::Omr, threshold: 0.5 }],
            cv: CvConfig::default(),
            perturbation: Some(PerturbationConfig::default()),
            estimators: EstimatorSet::default(),
            theta_choice: ThetaChoice::Combined,
            bandwidth: 1.0,
            level: 0.95,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.cv.validate()?;
        for m in &self.metrics {
            m.validate()?;
        }
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        if self.link == LinkKind::Custom {
            return Err(Error::validation("link", "custom links are only available through the library API"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::validation("bandwidth", "must be positive"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::validation("level", "must lie in (0, 1)"));
        }
        if let RidgeRule::Fixed(v) = self.ridge {
            if !(v >= 0.0) {
                return Err(Error::validation("ridge", "must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Per-stratum influence SDs of the supervised estimator of `metric` under a
/// linear working model, with the stratum shares ρ. Feeds Neyman allocation.
pub fn pilot_stratum_sds(dataset: &SemiSupervisedDataset, cfg: &AnalysisConfig, metric: &AccuracyMetric) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = AnalysisConfig { basis: BasisSpec::linear(), ..cfg.clone() };
    let (problem, _, _) = build_problem(dataset, &cfg)?;
    let theta = fit_theta_sl(&problem)?;
    let est = estimate_accuracy_sl(&problem, &theta, metric, cfg.bandwidth)?;
    let f = est.influence.ok_or_else(|| Error::validation("pilot", "influence records unavailable"))?;
    let strata: Vec<usize> = problem.labeled.iter().map(|&i| problem.design.unit_stratum[i]).collect();
    let sds = crate::allocation::estimate_stratum_sds(&f, &strata, problem.design.num_strata())?;
    Ok((sds, problem.design.rho.clone()))
}

/// Everything fitted for one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub design: SamplingDesign,
    pub basis_columns: usize,
    pub basis_rank: usize,
    pub lambda: f64,
    pub theta: Vec<ThetaFit>,
    pub intrinsic_theta: Vec<IntrinsicThetaFit>,
    pub accuracy: Vec<AccuracyEstimate>,
    pub perturbation: Vec<PerturbationSummary>,
    pub cv: Vec<(Variant, CvDiagnostics)>,
    pub imputation: Vec<ImputationFit>,
    pub warnings: Vec<Warning>,
}

impl Analysis {
    pub fn estimate(&self, metric: &AccuracyMetric, variant: Variant, flavor: Flavor) -> Option<&AccuracyEstimate> {
        self.accuracy.iter().find(|e| e.metric == *metric && e.variant == variant && e.flavor == flavor)
    }

    pub fn theta_fit(&self, variant: crate::estimators::ThetaVariant) -> Option<&ThetaFit> {
        self.theta.iter().find(|t| t.variant == variant)
    }
}

/// Builds the estimation problem for `dataset` under `cfg`.
pub fn build_problem(dataset: &SemiSupervisedDataset, cfg: &AnalysisConfig) -> Result<(Problem, Vec<Warning>, usize)> {
    let basis = expand(&cfg.basis, dataset)?;
    let mut warnings = basis.warnings.clone();
    let link = Link::from_kind(cfg.link).ok_or_else(|| Error::validation("link", "custom links need explicit functions"))?;
    let lambda = cfg.ridge.value(dataset.p(), dataset.n());
    let mut problem = Problem::new(dataset, &basis, link, cfg.solver.with_ridge(lambda))?;
    if cfg.design == DesignKind::Uniform {
        problem = problem.with_design(uniform_design(dataset)?);
    }
    if let Some(spec) = &cfg.dr_basis {
        let b = expand(spec, dataset)?;
        warnings.extend(b.warnings.iter().cloned());
        problem = problem.with_dr_basis(b.values)?;
    }
    Ok((problem, warnings, basis.rank))
}

fn normal_interval(center: f64, se: f64, level: f64) -> (f64, f64) {
    let z = normal_quantile(0.5 + level / 2.0);
    (center - z * se, center + z * se)
}

/// Runs every requested estimator on `dataset`.
pub fn analyze(dataset: &SemiSupervisedDataset, cfg: &AnalysisConfig) -> Result<Analysis> {
    cfg.validate()?;
    let (problem, mut warnings, basis_rank) = build_problem(dataset, cfg)?;
    let est = &cfg.estimators;
    let needs = CvNeeds { ssl: true, dr: est.dr && est.cross_validated };
    let cv_cfg = if est.cross_validated { cfg.cv.clone() } else { CvConfig { replications: 1, ..cfg.cv.clone() } };
    let run = run_cv(&problem, &cv_cfg, needs)?;
    warnings.extend(run.warnings.iter().cloned());
    let ssl = fit_theta_ssl(&problem, run.primary().expect("nonempty run"))?;
    warnings.extend(ssl.theta.warnings.iter().cloned());

    let mut theta = vec![ssl.theta_sl.clone()];
    if est.ssl {
        theta.push(ssl.theta_check.clone());
        theta.push(ssl.theta.clone());
    }
    let dr = if est.dr {
        let (fit, dr) = fit_theta_dr(&problem)?;
        warnings.extend(fit.warnings.iter().cloned());
        theta.push(fit);
        Some(dr)
    } else {
        None
    };

    let mut intrinsic_theta = Vec::new();
    if est.intrinsic {
        let p1 = problem.x.ncols();
        let dirs: Vec<DVector<f64>> = if est.intrinsic_directions.is_empty() {
            (0..p1).map(|j| DVector::from_fn(p1, |i, _| (i == j) as u8 as f64)).collect()
        } else {
            est.intrinsic_directions
                .iter()
                .map(|d| {
                    if d.len() != p1 {
                        Err(Error::validation("intrinsic_directions", format!("expected length {p1}")))
                    } else {
                        Ok(DVector::from_column_slice(d))
                    }
                })
                .collect::<Result<_>>()?
        };
        for e in &dirs {
            let fit = fit_intrinsic_theta(&problem, e, &ssl.theta_check.coefficients, &ssl.imputation.gamma.coefficients)?;
            warnings.extend(fit.warnings.iter().cloned());
            intrinsic_theta.push(fit);
        }
    }

    let mut accuracy = Vec::new();
    let mut perturbation = Vec::new();
    let mut cv_diag = Vec::new();
    let mut imputation = Vec::new();
    let k = cfg.cv.folds;
    for metric in &cfg.metrics {
        let mut sl = estimate_accuracy_sl(&problem, &ssl.theta_sl, metric, cfg.bandwidth)?;
        sl.ci = sl.se.map(|se| normal_interval(sl.value, se, cfg.level));
        accuracy.push(sl.clone());
        let mut ssl_pieces = None;
        if est.ssl {
            let (mut a, imp) = estimate_accuracy_ssl(&problem, &ssl, metric, cfg.theta_choice, cfg.bandwidth)?;
            a.ci = a.se.map(|se| normal_interval(a.value, se, cfg.level));
            if imp.degenerate {
                warnings.push(Warning::DegenerateZ);
            }
            accuracy.push(a.clone());
            ssl_pieces = Some((a, imp));
        }
        let dr_app = match &dr {
            Some(d) => {
                let a = estimate_accuracy_dr(&problem, d, metric)?;
                accuracy.push(a.clone());
                Some(a)
            }
            None => None,
        };
        let mut ssl_final = ssl_pieces.as_ref().map(|(a, _)| a.value);
        if est.cross_validated {
            let mut flavors: Vec<(Variant, &AccuracyEstimate)> = vec![(Variant::Sl, &sl)];
            if let Some((a, _)) = &ssl_pieces {
                flavors.push((Variant::Ssl, a));
            }
            if let Some(a) = &dr_app {
                flavors.push((Variant::Dr, a));
            }
            for (variant, app) in flavors {
                let (cv_est, diag) = crate::cv::cv_estimate(&problem, &run, metric, variant)?;
                let mut ens = ensemble(app, &cv_est, k)?;
                ens.ci = ens.se.map(|se| normal_interval(ens.value, se, cfg.level));
                if variant == Variant::Ssl {
                    ssl_final = Some(ens.value);
                }
                accuracy.push(cv_est);
                accuracy.push(ens);
                cv_diag.push((variant, diag));
            }
        }
        if let (Some((_, imp)), Some(pcfg)) = (&ssl_pieces, &cfg.perturbation) {
            let base = PerturbationBase::new(&problem, &ssl, imp, *metric)?;
            let summary = resample_se(&base, ssl_final.unwrap(), pcfg)?;
            let flavor = if est.cross_validated { Flavor::Ensemble } else { Flavor::Apparent };
            if let Some(target) = accuracy.iter_mut().find(|e| e.metric == *metric && e.variant == Variant::Ssl && e.flavor == flavor) {
                target.se = Some(summary.se);
                target.ci = Some(summary.ci);
            }
            warnings.extend(summary.warnings.iter().cloned());
            perturbation.push(summary);
        }
        if est.intrinsic {
            let (a, fit) = estimate_accuracy_intrinsic(&problem, metric, &ssl.theta_check.coefficients, cfg.bandwidth)?;
            warnings.extend(fit.warnings.iter().cloned());
            accuracy.push(a);
        }
        if let Some((_, imp)) = ssl_pieces {
            imputation.push(imp);
        }
    }

    Ok(Analysis {
        design: problem.design.clone(),
        basis_columns: problem.phi.ncols(),
        basis_rank,
        lambda: problem.lambda(),
        theta,
        intrinsic_theta,
        accuracy,
        perturbation,
        cv: cv_diag,
        imputation,
        warnings,
    })
}
