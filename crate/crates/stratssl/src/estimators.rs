//! Supervised, semi-supervised, density-ratio and intrinsic-efficient
//! estimators of the working-model parameter and of accuracy measures.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::cv::ReplicationFits;
use crate::data::{build_design, design_with_strata, SamplingDesign, SemiSupervisedDataset};
use crate::error::{Error, Result, Warning};
use crate::link::Link;
use crate::linalg::{inverse, select_rows};
use crate::metric::{bandwidth, linear_loss, loss, metric_gradient, AccuracyMetric};
use crate::solver::{
    default_ridge, real_data_ridge, ser_dvector, solve_augmentation, solve_constrained_wls,
    solve_density_ratio_tilt, solve_projection, solve_weighted_score, tilt_factors, AugmentationOutcome,
    ConstrainedProblem, SolveOutcome, SolverConfig,
};

/// How the imputation ridge λ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum RidgeRule {
    /// log(2p)/n^1.5.
    #[default]
    Simulation,
    /// 1/n.
    RealData,
    Fixed(f64),
}

impl RidgeRule {
    pub fn value(&self, p: usize, n: usize) -> f64 {
        match *self {
            RidgeRule::Simulation => default_ridge(p, n),
            RidgeRule::RealData => real_data_ridge(n),
            RidgeRule::Fixed(v) => v,
        }
    }
}

/// Everything an estimator needs, evaluated once per dataset.
#[derive(Debug, Clone)]
pub struct Problem {
    /// N×(p+1) working-model covariates with intercept.
    pub x: DMatrix<f64>,
    /// N×q imputation basis.
    pub phi: DMatrix<f64>,
    /// N×r density-ratio basis; the imputation basis when `None`.
    pub dr_phi: Option<DMatrix<f64>>,
    pub labeled: Vec<usize>,
    /// Outcome per unit; zero for unlabeled units.
    pub y_unit: Vec<f64>,
    pub design: SamplingDesign,
    pub link: Link,
    /// Solver settings; `ridge` is the imputation λ.
    pub solver: SolverConfig,
}

impl Problem {
    pub fn new(dataset: &SemiSupervisedDataset, basis: &BasisMatrix, link: Link, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        if basis.values.nrows() != dataset.big_n() {
            return Err(Error::validation("basis", "row count differs from dataset"));
        }
        let design = build_design(dataset)?;
        let mut y_unit = vec![0.0; dataset.big_n()];
        for (&i, &y) in dataset.labeled_index().iter().zip(dataset.outcomes()) {
            y_unit[i] = y;
        }
        Ok(Problem {
            x: dataset.design_matrix(),
            phi: basis.values.clone(),
            dr_phi: None,
            labeled: dataset.labeled_index().to_vec(),
            y_unit,
            design,
            link,
            solver,
        })
    }

    /// Replaces the sampling design, e.g. by a uniform one for naive fits.
    pub fn with_design(mut self, design: SamplingDesign) -> Self {
        self.design = design;
        self
    }

    pub fn with_dr_basis(mut self, phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != self.x.nrows() {
            return Err(Error::validation("dr_basis", "row count differs from dataset"));
        }
        self.dr_phi = Some(phi);
        Ok(self)
    }

    pub fn big_n(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.labeled.len()
    }

    pub fn normalizer(&self) -> f64 {
        self.big_n() as f64
    }

    pub fn lambda(&self) -> f64 {
        self.solver.ridge
    }

    pub fn dr_basis(&self) -> &DMatrix<f64> {
        self.dr_phi.as_ref().unwrap_or(&self.phi)
    }

    pub fn outcomes_at(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.y_unit[i]).collect()
    }

    /// Design in which only `subset` is sampled, with the problem's own strata.
    pub fn subset_design(&self, subset: &[usize]) -> Result<SamplingDesign> {
        design_with_strata(&self.design.unit_stratum, self.design.num_strata(), subset)
    }

    /// Linear predictor over all N units.
    pub fn eta(&self, m: &DMatrix<f64>, coef: &DVector<f64>) -> Vec<f64> {
        (m * coef).data.into()
    }

    /// IPW score fit of the working model on `design`'s members.
    pub fn solve_sl(&self, design: &SamplingDesign, ridge: f64) -> Result<SolveOutcome> {
        let xl = select_rows(&self.x, &design.members);
        solve_weighted_score(
            &xl,
            &self.outcomes_at(&design.members),
            &design.member_weights(),
            self.normalizer(),
            &self.link,
            &self.solver.with_ridge(ridge),
            None,
        )
    }

    /// Ridge-penalized imputation fit on `units` with weights `w`.
    pub fn solve_gamma(
        &self,
        units: &[usize],
        w: &[f64],
        normalizer: f64,
        ridge: f64,
        start: Option<&DVector<f64>>,
    ) -> Result<SolveOutcome> {
        let pl = select_rows(&self.phi, units);
        solve_weighted_score(&pl, &self.outcomes_at(units), w, normalizer, &self.link, &self.solver.with_ridge(ridge), start)
    }

    /// Projection of fitted imputations onto the working model over all N.
    pub fn project(&self, eta_gamma: &[f64], start: Option<&DVector<f64>>) -> Result<SolveOutcome> {
        let fitted: Vec<f64> = eta_gamma.iter().map(|&e| self.link.g(e)).collect();
        solve_projection(&self.x, &fitted, &self.link, &self.solver, start)
    }

    /// Â(θ) = N⁻¹ Σ ġ(θᵀx) x xᵀ over all N.
    pub fn a_hat(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let v: Vec<f64> = (&self.x * theta).iter().map(|&e| self.link.gdot(e)).collect();
        crate::linalg::weighted_crossprod(&self.x, &v) / self.normalizer()
    }

    pub fn a_hat_inverse(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        inverse(&self.a_hat(theta)).ok_or_else(|| Error::SingularJacobian { context: "A matrix".into() })
    }

    /// Fits ν on `units` with z = [1, 𝒴] and offsets from the imputation.
    #[allow(clippy::too_many_arguments)]
    pub fn augment(
        &self,
        units: &[usize],
        w: &[f64],
        normalizer: f64,
        eta_gamma: &[f64],
        yhat: &[f64],
        start: Option<&DVector<f64>>,
    ) -> Result<AugmentationOutcome> {
        let z = DMatrix::from_fn(units.len(), 2, |r, c| if c == 0 { 1.0 } else { yhat[units[r]] });
        let offset: Vec<f64> = units.iter().map(|&i| eta_gamma[i]).collect();
        solve_augmentation(&z, &offset, &self.outcomes_at(units), w, normalizer, &self.link, &self.solver, start)
    }

    /// Labeled rows of x in `design` member order.
    fn x_members(&self, design: &SamplingDesign) -> DMatrix<f64> {
        select_rows(&self.x, &design.members)
    }
}

/// Augmented imputations g(γᵀΦ + ν₁ + ν₂𝒴) over all units.
pub fn augmented_values(link: &Link, eta_gamma: &[f64], yhat: &[f64], nu: &DVector<f64>) -> Vec<f64> {
    eta_gamma.iter().zip(yhat).map(|(&e, &z)| link.g(e + nu[0] + nu[1] * z)).collect()
}

/// Plug-in accuracy N⁻¹ Σ [m(1 − 2𝒴) + 𝒴²] over all units.
pub fn plug_in_value(m: &[f64], yhat: &[f64]) -> f64 {
    m.iter().zip(yhat).map(|(&a, &b)| linear_loss(a, b)).sum::<f64>() / m.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ThetaVariant {
    Sl,
    SslCheck,
    SslCombined,
    Dr,
    Intrinsic,
}

/// Fitted working-model coefficients with influence records.
#[derive(Debug, Clone, Serialize)]
pub struct ThetaFit {
    pub variant: ThetaVariant,
    #[serde(serialize_with = "ser_dvector")]
    pub coefficients: DVector<f64>,
    /// n×(p+1) influence records, rows aligned with the labeled units.
    #[serde(skip)]
    pub influence: Option<DMatrix<f64>>,
    /// Diagonal of Ŵ for the combined estimator.
    pub combination_weights: Option<Vec<f64>>,
    #[serde(skip)]
    pub covariance: Option<DMatrix<f64>>,
    /// Asymptotic standard errors per coordinate.
    pub ase: Option<Vec<f64>>,
    pub warnings: Vec<Warning>,
}

/// Influence records A⁻¹ x_i r_i for labeled units.
fn influence_rows(problem: &Problem, a_inv: &DMatrix<f64>, residuals: &[f64]) -> DMatrix<f64> {
    let xl = select_rows(&problem.x, &problem.labeled);
    let mut rows = &xl * a_inv.transpose();
    for (i, &r) in residuals.iter().enumerate() {
        rows.row_mut(i).scale_mut(r);
    }
    rows
}

/// N⁻² Σ w_i² e_i e_iᵀ.
fn ipw_covariance(problem: &Problem, influence: &DMatrix<f64>) -> DMatrix<f64> {
    let w = problem.design.weights_at(&problem.labeled);
    let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
    crate::linalg::weighted_crossprod(influence, &w2) / problem.normalizer().powi(2)
}

/// Supervised IPW fit with λ = 0.
pub fn fit_theta_sl(problem: &Problem) -> Result<ThetaFit> {
    let out = problem.solve_sl(&problem.design, 0.0)?;
    let theta = out.coefficients;
    let a_inv = problem.a_hat_inverse(&theta)?;
    let res: Vec<f64> = problem
        .labeled
        .iter()
        .map(|&i| problem.y_unit[i] - problem.link.g((problem.x.row(i) * &theta)[0]))
        .collect();
    let influence = influence_rows(problem, &a_inv, &res);
    let cov = ipw_covariance(problem, &influence);
    let ase = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    Ok(ThetaFit {
        variant: ThetaVariant::Sl,
        coefficients: theta,
        influence: Some(influence),
        combination_weights: None,
        covariance: Some(cov),
        ase: Some(ase),
        warnings: Vec::new(),
    })
}

/// W₁ = (s₂₂ − s₁₂)/(s₁₁ + s₂₂ − 2s₁₂), the first entry of 1ᵀΣ⁻¹/(1ᵀΣ⁻¹1).
/// `None` when the denominator vanishes.
pub fn optimal_weight(s11: f64, s12: f64, s22: f64) -> Option<f64> {
    let den = s11 + s22 - 2.0 * s12;
    let scale = s11.abs().max(s22.abs());
    if !(den.is_finite() && den > 1e-14 * scale && scale > 0.0) {
        return None;
    }
    Some((s22 - s12) / den)
}

/// Weight after adding δ = n^(−1/2) tr(Σ)/2 to the diagonal and clipping to
/// [0, 1]. Falls back to 1/2 (second value true) when degenerate.
pub fn regularized_weight(s11: f64, s12: f64, s22: f64, n: usize) -> (f64, bool) {
    let delta = (n as f64).powf(-0.5) * (s11 + s22) / 2.0;
    match optimal_weight(s11 + delta, s12, s22 + delta) {
        Some(w) => (w.clamp(0.0, 1.0), false),
        None => (0.5, true),
    }
}

/// Step I imputation plus its projection.
#[derive(Debug, Clone, Serialize)]
pub struct ImputationStep {
    pub gamma: SolveOutcome,
    pub theta_check: SolveOutcome,
    #[serde(skip)]
    pub eta_gamma: Vec<f64>,
}

pub fn fit_imputation(problem: &Problem) -> Result<ImputationStep> {
    let d = &problem.design;
    let gamma = problem.solve_gamma(&d.members, &d.member_weights(), problem.normalizer(), problem.lambda(), None)?;
    let eta_gamma = problem.eta(&problem.phi, &gamma.coefficients);
    let theta_check = problem.project(&eta_gamma, None)?;
    Ok(ImputationStep { gamma, theta_check, eta_gamma })
}

/// Semi-supervised fit: imputation, projection, and the per-coordinate
/// combination with the supervised fit.
#[derive(Debug, Clone, Serialize)]
pub struct SslFit {
    pub imputation: ImputationStep,
    pub theta_sl: ThetaFit,
    pub theta_check: ThetaFit,
    pub theta: ThetaFit,
    /// Regularized second-moment matrices [s11, s12, s22] per coordinate.
    pub sigma: Vec<[f64; 3]>,
    /// g(γ̃₍₋k₎ᵀΦ_i) for each labeled unit, from its held-out fold.
    #[serde(skip)]
    pub cv_pred_gamma: Vec<f64>,
    /// g(θ̂₍₋k₎ᵀx_i) for each labeled unit, from its held-out fold.
    #[serde(skip)]
    pub cv_pred_theta: Vec<f64>,
}

/// Runs the semi-supervised θ pipeline. `folds` supplies the fold-wise
/// training fits used for the combination covariance.
pub fn fit_theta_ssl(problem: &Problem, folds: &ReplicationFits) -> Result<SslFit> {
    let imputation = fit_imputation(problem)?;
    let theta_sl = fit_theta_sl(problem)?;
    let theta_check = imputation.theta_check.coefficients.clone();
    let a_inv = problem.a_hat_inverse(&theta_check)?;

    let n = problem.n();
    let big_n = problem.normalizer();
    let pos: std::collections::HashMap<usize, usize> =
        problem.labeled.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut pred_gamma = vec![f64::NAN; n];
    let mut pred_theta = vec![f64::NAN; n];
    for f in &folds.folds {
        for &i in &f.units {
            let k = pos[&i];
            pred_gamma[k] = problem.link.g(f.eta_gamma[i]);
            pred_theta[k] = problem.link.g(f.eta_theta[i]);
        }
    }
    if pred_gamma.iter().any(|v| v.is_nan()) {
        return Err(Error::validation("folds", "fold fits do not cover every labeled unit"));
    }
    let w = problem.design.weights_at(&problem.labeled);
    let scale: Vec<f64> = w.iter().map(|&wi| wi * n as f64 / big_n).collect();
    let y = problem.outcomes_at(&problem.labeled);
    let r_w: Vec<f64> = (0..n).map(|k| scale[k] * (y[k] - pred_gamma[k])).collect();
    let r_v: Vec<f64> = (0..n).map(|k| scale[k] * (y[k] - pred_theta[k])).collect();
    let cw = influence_rows(problem, &a_inv, &r_w);
    let cv = influence_rows(problem, &a_inv, &r_v);

    let p1 = problem.x.ncols();
    let mut weights = vec![0.5; p1];
    let mut sigma = Vec::with_capacity(p1);
    let mut warnings = Vec::new();
    for j in 0..p1 {
        let (a, b) = (cw.column(j), cv.column(j));
        let s11 = a.dot(&a) / n as f64;
        let s12 = a.dot(&b) / n as f64;
        let s22 = b.dot(&b) / n as f64;
        let (wj, degenerate) = regularized_weight(s11, s12, s22, n);
        if degenerate {
            warnings.push(Warning::CovarianceDegenerate { coordinate: j });
        }
        weights[j] = wj;
        sigma.push([s11, s12, s22]);
    }
    let theta_sl_c = &theta_sl.coefficients;
    let coefficients = DVector::from_fn(p1, |j, _| weights[j] * theta_check[j] + (1.0 - weights[j]) * theta_sl_c[j]);
    let cov = crate::inference::theta_ssl_covariance(&cw, &cv, &weights);
    let ase = cov.diagonal().iter().map(|v| (v / n as f64).sqrt()).collect();

    // non-CV influence of θ̌ and of the combination
    let res_ssl: Vec<f64> = (0..n)
        .map(|k| y[k] - problem.link.g(imputation.eta_gamma[problem.labeled[k]]))
        .collect();
    let e_ssl = influence_rows(problem, &a_inv, &res_ssl);
    let e_sl = theta_sl.influence.as_ref().unwrap();
    let mut e_comb = e_ssl.clone();
    for j in 0..p1 {
        let mut c = e_comb.column_mut(j);
        c.scale_mut(weights[j]);
        c.axpy(1.0 - weights[j], &e_sl.column(j), 1.0);
    }
    let check_cov = ipw_covariance(problem, &e_ssl);
    let theta_check_fit = ThetaFit {
        variant: ThetaVariant::SslCheck,
        coefficients: theta_check,
        ase: Some(check_cov.diagonal().iter().map(|v| v.sqrt()).collect()),
        covariance: Some(check_cov),
        influence: Some(e_ssl),
        combination_weights: None,
        warnings: Vec::new(),
    };
    let theta = ThetaFit {
        variant: ThetaVariant::SslCombined,
        coefficients,
        influence: Some(e_comb),
        combination_weights: Some(weights),
        covariance: Some(cov),
        ase: Some(ase),
        warnings,
    };
    Ok(SslFit {
        imputation,
        theta_sl,
        theta_check: theta_check_fit,
        theta,
        sigma,
        cv_pred_gamma: pred_gamma,
        cv_pred_theta: pred_theta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sl,
    Ssl,
    Dr,
    Intrinsic,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Sl => "sl",
            Variant::Ssl => "ssl",
            Variant::Dr => "dr",
            Variant::Intrinsic => "intrinsic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Apparent,
    Cv,
    Ensemble,
}

/// A point estimate of an accuracy measure.
#[derive(Debug, Clone, Serialize)]
pub struct AccuracyEstimate {
    pub metric: AccuracyMetric,
    pub variant: Variant,
    pub flavor: Flavor,
    pub value: f64,
    /// Influence-function standard error, when available.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Per-labeled-unit influence records.
    #[serde(skip)]
    pub influence: Option<Vec<f64>>,
}

impl AccuracyEstimate {
    pub fn apparent(metric: AccuracyMetric, variant: Variant, value: f64) -> Self {
        AccuracyEstimate { metric, variant, flavor: Flavor::Apparent, value, se: None, ci: None, influence: None }
    }
}

/// SE from per-unit influence records: N⁻¹ (Σ w_i² f_i²)^(1/2).
pub fn influence_se(problem: &Problem, f: &[f64]) -> f64 {
    let w = problem.design.weights_at(&problem.labeled);
    (w.iter().zip(f).map(|(a, b)| a * a * b * b).sum::<f64>()).sqrt() / problem.normalizer()
}

/// Apparent supervised estimate N⁻¹ Σ w d(y, 𝒴(θᵀx)) with influence
/// d_i − D + Ḋᵀe_i.
pub fn estimate_accuracy_sl(problem: &Problem, theta: &ThetaFit, metric: &AccuracyMetric, h0: f64) -> Result<AccuracyEstimate> {
    metric.validate()?;
    let th = &theta.coefficients;
    let d = &problem.design;
    let xl = problem.x_members(d);
    let y = problem.outcomes_at(&d.members);
    let w = d.member_weights();
    let eta: Vec<f64> = (&xl * th).iter().cloned().collect();
    let losses: Vec<f64> = eta.iter().zip(&y).map(|(&e, &yi)| loss(yi, metric.predict(&problem.link, e))).collect();
    let value = w.iter().zip(&losses).map(|(a, b)| a * b).sum::<f64>() / problem.normalizer();
    let mut est = AccuracyEstimate::apparent(*metric, Variant::Sl, value);
    if let Some(e) = &theta.influence {
        if d.members == problem.labeled {
            let h = bandwidth(h0, problem.n());
            let ddot = metric_gradient(metric, &xl, &y, &w, problem.normalizer(), &problem.link, th, h);
            let f: Vec<f64> = (0..losses.len()).map(|k| losses[k] - value + (e.row(k) * &ddot)[0]).collect();
            est.se = Some(influence_se(problem, &f));
            est.influence = Some(f);
        }
    }
    Ok(est)
}

/// Augmentation at a given θ.
#[derive(Debug, Clone, Serialize)]
pub struct ImputationFit {
    #[serde(serialize_with = "ser_dvector")]
    pub gamma: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub nu: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub theta: DVector<f64>,
    pub degenerate: bool,
    /// Weighted residual moments against [1, 𝒴] after augmentation.
    pub orthogonality: [f64; 2],
    /// m̃_II over all units.
    #[serde(skip)]
    pub augmented: Vec<f64>,
    #[serde(skip)]
    pub yhat: Vec<f64>,
}

/// Which θ the semi-supervised accuracy estimate is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThetaChoice {
    #[default]
    Combined,
    Check,
}

/// Augments the imputation at `theta` on all labeled units.
pub fn augment_at(problem: &Problem, eta_gamma: &[f64], gamma: &DVector<f64>, theta: &DVector<f64>, metric: &AccuracyMetric) -> Result<ImputationFit> {
    let d = &problem.design;
    let eta_theta = problem.eta(&problem.x, theta);
    let yhat = metric.predict_all(&problem.link, &eta_theta);
    let w = d.member_weights();
    let aug = problem.augment(&d.members, &w, problem.normalizer(), eta_gamma, &yhat, None)?;
    let nu = aug.outcome.coefficients;
    let augmented = augmented_values(&problem.link, eta_gamma, &yhat, &nu);
    let mut orth = [0.0; 2];
    for (k, &i) in d.members.iter().enumerate() {
        let r = w[k] * (problem.y_unit[i] - augmented[i]);
        orth[0] += r;
        orth[1] += r * yhat[i];
    }
    orth[0] /= problem.normalizer();
    orth[1] /= problem.normalizer();
    Ok(ImputationFit { gamma: gamma.clone(), nu, theta: theta.clone(), degenerate: aug.degenerate, orthogonality: orth, augmented, yhat })
}

/// Apparent semi-supervised estimate N⁻¹ Σ_all [m̃(1 − 2𝒴) + 𝒴²].
pub fn estimate_accuracy_ssl(
    problem: &Problem,
    ssl: &SslFit,
    metric: &AccuracyMetric,
    choice: ThetaChoice,
    h0: f64,
) -> Result<(AccuracyEstimate, ImputationFit)> {
    metric.validate()?;
    let theta_fit = match choice {
        ThetaChoice::Combined => &ssl.theta,
        ThetaChoice::Check => &ssl.theta_check,
    };
    let th = &theta_fit.coefficients;
    let imp = augment_at(problem, &ssl.imputation.eta_gamma, &ssl.imputation.gamma.coefficients, th, metric)?;
    let value = plug_in_value(&imp.augmented, &imp.yhat);
    let mut est = AccuracyEstimate::apparent(*metric, Variant::Ssl, value);
    if let Some(e) = &theta_fit.influence {
        let d = &problem.design;
        let xl = problem.x_members(d);
        let y = problem.outcomes_at(&d.members);
        let ddot = metric_gradient(metric, &xl, &y, &d.member_weights(), problem.normalizer(), &problem.link, th, bandwidth(h0, problem.n()));
        let f: Vec<f64> = problem
            .labeled
            .iter()
            .enumerate()
            .map(|(k, &i)| (1.0 - 2.0 * imp.yhat[i]) * (problem.y_unit[i] - imp.augmented[i]) + (e.row(k) * &ddot)[0])
            .collect();
        est.se = Some(influence_se(problem, &f));
        est.influence = Some(f);
    }
    Ok((est, imp))
}

/// Density-ratio fit on one design.
#[derive(Debug, Clone, Serialize)]
pub struct DrFit {
    #[serde(serialize_with = "ser_dvector")]
    pub alpha: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub theta: DVector<f64>,
    /// Tilt factors exp(αᵀφ) for the design members.
    #[serde(skip)]
    pub tilt: Vec<f64>,
    #[serde(skip)]
    pub members: Vec<usize>,
    /// Tilted weights w·exp(αᵀφ) for the members.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub warnings: Vec<Warning>,
}

/// Column means of `m`.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Tilts the design weights to match full-data basis moments, then refits the
/// working model with the tilted weights.
pub fn fit_dr(problem: &Problem, design: &SamplingDesign, phi_mean: &DVector<f64>, ridge: f64) -> Result<DrFit> {
    let phi_l = select_rows(problem.dr_basis(), &design.members);
    let w = design.member_weights();
    let tilt = solve_density_ratio_tilt(&phi_l, &w, phi_mean, problem.normalizer(), &problem.solver.with_ridge(ridge))?;
    let alpha = tilt.outcome.coefficients;
    let (factors, clamped) = tilt_factors(&phi_l, &alpha);
    let mut warnings = Vec::new();
    if clamped > 0 {
        warnings.push(Warning::OverflowGuard { clamped });
    }
    let max_ratio = factors.iter().cloned().fold(0.0, f64::max);
    if max_ratio > 10.0 {
        warnings.push(Warning::ExtremeTilt { max_ratio });
    }
    let tw: Vec<f64> = w.iter().zip(&factors).map(|(a, b)| a * b).collect();
    let xl = select_rows(&problem.x, &design.members);
    let theta = solve_weighted_score(
        &xl,
        &problem.outcomes_at(&design.members),
        &tw,
        problem.normalizer(),
        &problem.link,
        &problem.solver.with_ridge(0.0),
        None,
    )?
    .coefficients;
    Ok(DrFit { alpha, theta, tilt: factors, members: design.members.clone(), weights: tw, warnings })
}

/// Density-ratio θ fit on the full labeled set.
pub fn fit_theta_dr(problem: &Problem) -> Result<(ThetaFit, DrFit)> {
    let mean = column_means(problem.dr_basis());
    let dr = fit_dr(problem, &problem.design, &mean, problem.lambda())?;
    let fit = ThetaFit {
        variant: ThetaVariant::Dr,
        coefficients: dr.theta.clone(),
        influence: None,
        combination_weights: None,
        covariance: None,
        ase: None,
        warnings: dr.warnings.clone(),
    };
    Ok((fit, dr))
}

/// Apparent density-ratio estimate N⁻¹ Σ w·exp(αᵀφ)·d(y, 𝒴(θ_DRᵀx)).
pub fn estimate_accuracy_dr(problem: &Problem, dr: &DrFit, metric: &AccuracyMetric) -> Result<AccuracyEstimate> {
    metric.validate()?;
    let mut s = 0.0;
    for (k, &i) in dr.members.iter().enumerate() {
        let e = (problem.x.row(i) * &dr.theta)[0];
        s += dr.weights[k] * loss(problem.y_unit[i], metric.predict(&problem.link, e));
    }
    Ok(AccuracyEstimate::apparent(*metric, Variant::Dr, s / problem.normalizer()))
}

/// Intrinsic-efficient estimate of eᵀθ.
#[derive(Debug, Clone, Serialize)]
pub struct IntrinsicThetaFit {
    #[serde(serialize_with = "ser_dvector")]
    pub direction: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub theta: DVector<f64>,
    /// eᵀθ̂.
    pub value: f64,
    pub gamma: SolveOutcome,
    pub warnings: Vec<Warning>,
}

fn constrained_or_best(res: Result<SolveOutcome>, context: &str, warnings: &mut Vec<Warning>) -> Result<SolveOutcome> {
    match res {
        Ok(o) => Ok(o),
        Err(Error::NonConvergence { best }) => {
            warnings.push(Warning::SolverStalled { context: context.to_string() });
            Ok(*best)
        }
        Err(e) => Err(e),
    }
}

/// ζ_i = ρ_s²/ρ_1s² for the labeled units.
fn zeta_labeled(problem: &Problem) -> Vec<f64> {
    problem.design.members.iter().map(|&i| problem.design.zeta(i)).collect()
}

/// Minimizes the estimated asymptotic variance of eᵀθ̂ over imputation
/// coefficients subject to the x-moment calibration, starting from
/// `gamma_start`, then projects.
pub fn fit_intrinsic_theta(
    problem: &Problem,
    direction: &DVector<f64>,
    theta_prelim: &DVector<f64>,
    gamma_start: &DVector<f64>,
) -> Result<IntrinsicThetaFit> {
    if direction.iter().all(|&v| v == 0.0) {
        return Err(Error::validation("direction", "must be nonzero"));
    }
    let d = &problem.design;
    let a_inv = problem.a_hat_inverse(theta_prelim)?;
    let xl = problem.x_members(d);
    let h = &xl * (a_inv.transpose() * direction);
    let zeta = zeta_labeled(problem);
    let a: Vec<f64> = (0..xl.nrows()).map(|k| zeta[k] * h[k] * h[k]).collect();
    let phi_l = select_rows(&problem.phi, &d.members);
    let y = problem.outcomes_at(&d.members);
    let w = d.member_weights();
    let prob = ConstrainedProblem { phi: &phi_l, y: &y, loss_weights: &a, moments: &xl, weights: &w, normalizer: problem.normalizer() };
    let mut warnings = Vec::new();
    let gamma = constrained_or_best(
        solve_constrained_wls(&prob, &problem.link, &problem.solver, gamma_start),
        "intrinsic theta",
        &mut warnings,
    )?;
    let eta = problem.eta(&problem.phi, &gamma.coefficients);
    let theta = problem.project(&eta, Some(theta_prelim))?.coefficients;
    let value = direction.dot(&theta);
    Ok(IntrinsicThetaFit { direction: direction.clone(), theta, value, gamma, warnings })
}

/// Intrinsic-efficient accuracy fit.
#[derive(Debug, Clone, Serialize)]
pub struct IntrinsicAccuracyFit {
    pub gamma: SolveOutcome,
    #[serde(serialize_with = "ser_dvector")]
    pub theta: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub nu: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub derivative: DVector<f64>,
    pub warnings: Vec<Warning>,
}

/// Minimizes the estimated asymptotic variance of D̂ over coefficients on
/// Ψ = [Φ, 𝒴(θ̃ᵀx)] subject to [x, 𝒴] calibration, projects to θ̂ᴰ,
/// re-augments at θ̂ᴰ and returns the plug-in value.
pub fn estimate_accuracy_intrinsic(
    problem: &Problem,
    metric: &AccuracyMetric,
    theta_prelim: &DVector<f64>,
    h0: f64,
) -> Result<(AccuracyEstimate, IntrinsicAccuracyFit)> {
    metric.validate()?;
    let d = &problem.design;
    let big_n = problem.big_n();
    let link = &problem.link;
    let yhat_t = metric.predict_all(link, &problem.eta(&problem.x, theta_prelim));
    let q = problem.phi.ncols();
    let psi = DMatrix::from_fn(big_n, q + 1, |i, j| if j < q { problem.phi[(i, j)] } else { yhat_t[i] });

    let xl = problem.x_members(d);
    let y = problem.outcomes_at(&d.members);
    let w = d.member_weights();
    let ddot = metric_gradient(metric, &xl, &y, &w, problem.normalizer(), link, theta_prelim, bandwidth(h0, problem.n()));
    let a_inv = problem.a_hat_inverse(theta_prelim)?;
    let proj = &xl * (a_inv.transpose() * &ddot);
    let zeta = zeta_labeled(problem);
    let a: Vec<f64> = d
        .members
        .iter()
        .enumerate()
        .map(|(k, &i)| zeta[k] * (1.0 - 2.0 * yhat_t[i] + proj[k]).powi(2))
        .collect();
    let psi_l = select_rows(&psi, &d.members);
    let moments = DMatrix::from_fn(d.members.len(), xl.ncols() + 1, |r, c| {
        if c < xl.ncols() {
            xl[(r, c)]
        } else {
            yhat_t[d.members[r]]
        }
    });
    let start = solve_weighted_score(&psi_l, &y, &w, problem.normalizer(), link, &problem.solver, None)?.coefficients;
    let prob = ConstrainedProblem { phi: &psi_l, y: &y, loss_weights: &a, moments: &moments, weights: &w, normalizer: problem.normalizer() };
    let mut warnings = Vec::new();
    let gamma = constrained_or_best(
        solve_constrained_wls(&prob, link, &problem.solver, &start),
        "intrinsic accuracy",
        &mut warnings,
    )?;
    let eta_psi = problem.eta(&psi, &gamma.coefficients);
    let theta_d = problem.project(&eta_psi, Some(theta_prelim))?.coefficients;
    let yhat_d = metric.predict_all(link, &problem.eta(&problem.x, &theta_d));
    let aug = problem.augment(&d.members, &w, problem.normalizer(), &eta_psi, &yhat_d, None)?;
    if aug.degenerate {
        warnings.push(Warning::DegenerateZ);
    }
    let nu = aug.outcome.coefficients;
    let m = augmented_values(link, &eta_psi, &yhat_d, &nu);
    let value = plug_in_value(&m, &yhat_d);
    let est = AccuracyEstimate::apparent(*metric, Variant::Intrinsic, value);
    Ok((est, IntrinsicAccuracyFit { gamma, theta: theta_d, nu, derivative: ddot, warnings }))
}
