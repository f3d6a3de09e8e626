//! Newton root-finders for the weighted estimating equations, plus an SQP
//! solver for equality-constrained weighted least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::link::Link;
use crate::linalg::{max_abs, solve, weighted_colsum, weighted_crossprod};

/// Linear predictors beyond this magnitude in an unpenalized fit indicate
/// (quasi-)separation.
pub const SEPARATION_ETA: f64 = 30.0;

/// Exponent clamp for the density-ratio tilt.
pub const TILT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Max-norm tolerance on the estimating function.
    pub score_tolerance: f64,
    pub step_halving_max: usize,
    /// Ridge penalty λ.
    pub ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iterations: 100, score_tolerance: 1e-9, step_halving_max: 30, ridge: 0.0 }
    }
}

impl SolverConfig {
    pub fn with_ridge(&self, ridge: f64) -> Self {
        SolverConfig { ridge, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.score_tolerance > 0.0) {
            return Err(Error::validation("score_tolerance", "must be positive"));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::validation("ridge", "must be a nonnegative finite number"));
        }
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Default ridge log(2p)/n^1.5, with p the number of covariates.
pub fn default_ridge(p: usize, n: usize) -> f64 {
    (2.0 * p as f64).ln() / (n as f64).powf(1.5)
}

/// Ridge 1/n used for real-data analyses.
pub fn real_data_ridge(n: usize) -> f64 {
    1.0 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutcome {
    #[serde(serialize_with = "ser_dvector")]
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
}

pub(crate) fn ser_dvector<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Damped Newton iteration for `score(x) = 0`. `eval(x, want_jacobian)`
/// returns the score and, on request, its Jacobian. Steps are halved until
/// the score max-norm strictly decreases.
pub fn newton<F>(start: DVector<f64>, cfg: &SolverConfig, context: &str, mut eval: F) -> Result<SolveOutcome>
where
    F: FnMut(&DVector<f64>, bool) -> (DVector<f64>, Option<DMatrix<f64>>),
{
    let mut x = start;
    let (mut s, mut jac) = eval(&x, true);
    let mut norm = max_abs(&s);
    if !norm.is_finite() {
        return Err(Error::SingularJacobian { context: format!("{context}: non-finite score at start") });
    }
    let mut iterations = 0;
    while norm > cfg.score_tolerance && iterations < cfg.max_iterations {
        let j = jac.take().expect("jacobian requested");
        let step = solve(&j, &(-&s)).ok_or_else(|| Error::SingularJacobian { context: context.to_string() })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.step_halving_max {
            let cand = &x + &step * t;
            let (s_new, _) = eval(&cand, false);
            let n_new = max_abs(&s_new);
            if n_new.is_finite() && n_new < norm {
                x = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        let (s_new, j_new) = eval(&x, true);
        s = s_new;
        jac = j_new;
        norm = max_abs(&s);
    }
    let outcome = SolveOutcome { coefficients: x, converged: norm <= cfg.score_tolerance, iterations, score_norm: norm };
    if outcome.converged {
        Ok(outcome)
    } else {
        Err(Error::NonConvergence { best: Box::new(outcome) })
    }
}

/// Score `normalizer⁻¹ Σ w_i φ_i (y_i − g(γᵀφ_i + o_i)) − λγ` and its Jacobian.
#[allow(clippy::too_many_arguments)]
fn glm_score(
    phi: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    normalizer: f64,
    ridge: f64,
    link: &Link,
    gamma: &DVector<f64>,
    want_jac: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let eta = phi * gamma;
    let rows = phi.nrows();
    let mut r = vec![0.0; rows];
    let mut d = if want_jac { vec![0.0; rows] } else { Vec::new() };
    for i in 0..rows {
        let e = eta[i] + offset.map_or(0.0, |o| o[i]);
        let (g, gd) = link.g_gdot(e);
        r[i] = w[i] * (y[i] - g);
        if want_jac {
            d[i] = w[i] * gd;
        }
    }
    let score = weighted_colsum(phi, &r) / normalizer - gamma * ridge;
    let jac = want_jac.then(|| {
        let mut j = weighted_crossprod(phi, &d) / (-normalizer);
        for k in 0..j.nrows() {
            j[(k, k)] -= ridge;
        }
        j
    });
    (score, jac)
}

fn check_weights(w: &[f64], rows: usize) -> Result<()> {
    if w.len() != rows {
        return Err(Error::validation("weights", format!("length {} != {rows} rows", w.len())));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::validation("weights", "must be nonnegative and finite"));
    }
    if !w.iter().any(|&v| v > 0.0) {
        return Err(Error::validation("weights", "at least one weight must be positive"));
    }
    Ok(())
}

/// Solves `normalizer⁻¹ Σ w_i φ_i (y_i − g(γᵀφ_i)) − λγ = 0` over labeled rows
/// by Newton from `start` (zero by default). With λ = 0, divergence towards
/// separation raises `SingularJacobian`.
#[allow(clippy::too_many_arguments)]
pub fn solve_weighted_score(
    phi: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    normalizer: f64,
    link: &Link,
    cfg: &SolverConfig,
    start: Option<&DVector<f64>>,
) -> Result<SolveOutcome> {
    check_weights(w, phi.nrows())?;
    if y.len() != phi.nrows() {
        return Err(Error::validation("outcomes", "length differs from basis rows"));
    }
    let start = start.cloned().unwrap_or_else(|| DVector::zeros(phi.ncols()));
    let res = newton(start, cfg, "weighted score", |g, j| glm_score(phi, y, w, None, normalizer, cfg.ridge, link, g, j));
    if cfg.ridge == 0.0 {
        let eta_max = |c: &DVector<f64>| max_abs(&(phi * c));
        match &res {
            Ok(out) if eta_max(&out.coefficients) > SEPARATION_ETA => {
                return Err(Error::SingularJacobian { context: "weighted score (separation)".into() })
            }
            Err(Error::NonConvergence { best }) if eta_max(&best.coefficients) > SEPARATION_ETA => {
                return Err(Error::SingularJacobian { context: "weighted score (separation)".into() })
            }
            _ => {}
        }
    }
    res
}

/// Same score with per-row offsets and a warm start; used by re-solves.
#[allow(clippy::too_many_arguments)]
pub fn solve_weighted_score_offset(
    phi: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    offset: &[f64],
    normalizer: f64,
    link: &Link,
    cfg: &SolverConfig,
    start: Option<&DVector<f64>>,
) -> Result<SolveOutcome> {
    check_weights(w, phi.nrows())?;
    let start = start.cloned().unwrap_or_else(|| DVector::zeros(phi.ncols()));
    newton(start, cfg, "offset score", |g, j| glm_score(phi, y, w, Some(offset), normalizer, cfg.ridge, link, g, j))
}

/// Solves `N⁻¹ Σ x_i (p_i − g(θᵀx_i)) = 0` over all N rows, without ridge.
pub fn solve_projection(
    x: &DMatrix<f64>,
    fitted: &[f64],
    link: &Link,
    cfg: &SolverConfig,
    start: Option<&DVector<f64>>,
) -> Result<SolveOutcome> {
    if fitted.len() != x.nrows() {
        return Err(Error::validation("fitted_probabilities", "length differs from rows"));
    }
    let ones = vec![1.0; x.nrows()];
    let big_n = x.nrows() as f64;
    let start = start.cloned().unwrap_or_else(|| DVector::zeros(x.ncols()));
    newton(start, cfg, "projection", |t, j| glm_score(x, fitted, &ones, None, big_n, 0.0, link, t, j))
}

/// Result of the two-coefficient augmentation fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentationOutcome {
    pub outcome: SolveOutcome,
    /// True when the second column of z was constant and only the intercept
    /// was fitted.
    pub degenerate: bool,
}

/// Solves `normalizer⁻¹ Σ w_i z_i (y_i − g(o_i + νᵀz_i)) = 0` for the n×2
/// matrix `z = [1, 𝒴]` with fixed offsets `o`. A constant second column
/// falls back to the intercept equation with ν₂ = 0.
#[allow(clippy::too_many_arguments)]
pub fn solve_augmentation(
    z: &DMatrix<f64>,
    offset: &[f64],
    y: &[f64],
    w: &[f64],
    normalizer: f64,
    link: &Link,
    cfg: &SolverConfig,
    start: Option<&DVector<f64>>,
) -> Result<AugmentationOutcome> {
    check_weights(w, z.nrows())?;
    let cfg = cfg.with_ridge(0.0);
    let col = z.column(1);
    let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    // Only rows with positive weight matter for degeneracy.
    let active: Vec<usize> = (0..z.nrows()).filter(|&i| w[i] > 0.0).collect();
    let (alo, ahi) = active.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(col[i]), b.max(col[i])));
    let degenerate = hi - lo <= 1e-12 || ahi - alo <= 1e-12;
    if degenerate {
        let ones = DMatrix::from_element(z.nrows(), 1, 1.0);
        let s0 = start.map(|s| DVector::from_element(1, s[0]));
        let out = newton(s0.unwrap_or_else(|| DVector::zeros(1)), &cfg, "augmentation", |g, j| {
            glm_score(&ones, y, w, Some(offset), normalizer, 0.0, link, g, j)
        })?;
        let coefficients = DVector::from_vec(vec![out.coefficients[0], 0.0]);
        return Ok(AugmentationOutcome { outcome: SolveOutcome { coefficients, ..out }, degenerate: true });
    }
    let start = start.cloned().unwrap_or_else(|| DVector::zeros(2));
    let out = newton(start, &cfg, "augmentation", |g, j| glm_score(z, y, w, Some(offset), normalizer, 0.0, link, g, j))?;
    Ok(AugmentationOutcome { outcome: out, degenerate: false })
}

/// Equality-constrained weighted least squares:
/// minimize `(2n)⁻¹ Σ a_i (y_i − g(γᵀφ_i))² + λ‖γ‖²`
/// subject to `N⁻¹ Σ w_i m_i (y_i − g(γᵀφ_i)) = 0`.
pub struct ConstrainedProblem<'a> {
    /// n×q basis on labeled rows.
    pub phi: &'a DMatrix<f64>,
    pub y: &'a [f64],
    /// Loss weights a_i.
    pub loss_weights: &'a [f64],
    /// n×r constraint moment columns m_i.
    pub moments: &'a DMatrix<f64>,
    /// Constraint weights w_i.
    pub weights: &'a [f64],
    /// N in the constraint normalization.
    pub normalizer: f64,
}

/// Tolerance on constraint residuals for an iterate to count as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

struct CwlsEval {
    loss: f64,
    grad: DVector<f64>,
    cons: DVector<f64>,
    cjac: DMatrix<f64>,
    hess_exact: DMatrix<f64>,
    hess_gn: DMatrix<f64>,
}

impl ConstrainedProblem<'_> {
    fn n(&self) -> f64 {
        self.phi.nrows() as f64
    }

    fn loss_and_cons(&self, gamma: &DVector<f64>, link: &Link, ridge: f64) -> (f64, DVector<f64>) {
        let eta = self.phi * gamma;
        let mut loss = 0.0;
        let mut r = vec![0.0; eta.len()];
        for i in 0..eta.len() {
            let res = self.y[i] - link.g(eta[i]);
            loss += self.loss_weights[i] * res * res;
            r[i] = self.weights[i] * res;
        }
        let loss = loss / (2.0 * self.n()) + ridge * gamma.norm_squared();
        (loss, weighted_colsum(self.moments, &r) / self.normalizer)
    }

    fn eval(&self, gamma: &DVector<f64>, link: &Link, ridge: f64) -> CwlsEval {
        let eta = self.phi * gamma;
        let rows = eta.len();
        let n = self.n();
        let mut loss = 0.0;
        let mut gr = vec![0.0; rows];
        let mut he = vec![0.0; rows];
        let mut hg = vec![0.0; rows];
        let mut cr = vec![0.0; rows];
        let mut cd = DMatrix::zeros(rows, self.moments.ncols());
        for i in 0..rows {
            let g = link.g(eta[i]);
            let gd = link.gdot(eta[i]);
            let gdd = link.gddot(eta[i]);
            let res = self.y[i] - g;
            let a = self.loss_weights[i];
            loss += a * res * res;
            gr[i] = -a * res * gd;
            hg[i] = a * gd * gd;
            he[i] = a * (gd * gd - res * gdd);
            cr[i] = self.weights[i] * res;
            for k in 0..self.moments.ncols() {
                cd[(i, k)] = -self.weights[i] * gd * self.moments[(i, k)];
            }
        }
        let loss = loss / (2.0 * n) + ridge * gamma.norm_squared();
        let grad = weighted_colsum(self.phi, &gr) / n + gamma * (2.0 * ridge);
        let mut hess_exact = weighted_crossprod(self.phi, &he) / n;
        let mut hess_gn = weighted_crossprod(self.phi, &hg) / n;
        for k in 0..gamma.len() {
            hess_exact[(k, k)] += 2.0 * ridge;
            hess_gn[(k, k)] += 2.0 * ridge;
        }
        let cons = weighted_colsum(self.moments, &cr) / self.normalizer;
        let cjac = cd.tr_mul(self.phi) / self.normalizer;
        CwlsEval { loss, grad, cons, cjac, hess_exact, hess_gn }
    }
}

fn kkt_step(h: &DMatrix<f64>, ev: &CwlsEval) -> Option<(DVector<f64>, DVector<f64>)> {
    let q = h.nrows();
    let r = ev.cons.len();
    let mut k = DMatrix::zeros(q + r, q + r);
    k.view_mut((0, 0), (q, q)).copy_from(h);
    k.view_mut((0, q), (q, r)).copy_from(&ev.cjac.transpose());
    k.view_mut((q, 0), (r, q)).copy_from(&ev.cjac);
    let mut rhs = DVector::zeros(q + r);
    rhs.rows_mut(0, q).copy_from(&(-&ev.grad));
    rhs.rows_mut(q, r).copy_from(&(-&ev.cons));
    let sol = solve(&k, &rhs)?;
    Some((sol.rows(0, q).into_owned(), sol.rows(q, r).into_owned()))
}

/// SQP Newton on the KKT system from `start`, with an L1 merit line search.
/// Uses the exact Hessian of the loss and falls back to its Gauss-Newton
/// part when the exact step fails or does not descend.
pub fn solve_constrained_wls(
    problem: &ConstrainedProblem<'_>,
    link: &Link,
    cfg: &SolverConfig,
    start: &DVector<f64>,
) -> Result<SolveOutcome> {
    check_weights(problem.weights, problem.phi.nrows())?;
    let ridge = cfg.ridge;
    let mut gamma = start.clone();
    let mut ev = problem.eval(&gamma, link, ridge);
    let mut mu = least_squares_multipliers(&ev);
    let mut penalty = 1.0f64;
    // stationarity is measured relative to the loss-weight scale
    let scale = 1.0 + problem.loss_weights.iter().sum::<f64>() / problem.n();
    let kkt_norm = |ev: &CwlsEval, mu: &DVector<f64>| -> f64 {
        let stat = max_abs(&(&ev.grad + ev.cjac.tr_mul(mu))) / scale;
        stat.max(max_abs(&ev.cons))
    };
    let mut norm = kkt_norm(&ev, &mu);
    let mut best: Option<SolveOutcome> = None;
    let record_best = |gamma: &DVector<f64>, ev: &CwlsEval, norm: f64, it: usize, best: &mut Option<SolveOutcome>| {
        if max_abs(&ev.cons) <= FEASIBILITY_TOL && best.as_ref().is_none_or(|b| norm < b.score_norm) {
            *best = Some(SolveOutcome { coefficients: gamma.clone(), converged: false, iterations: it, score_norm: norm });
        }
    };
    record_best(&gamma, &ev, norm, 0, &mut best);
    let mut iterations = 0;
    while norm > cfg.score_tolerance && iterations < cfg.max_iterations {
        iterations += 1;
        let mut accepted = false;
        for hess in [&ev.hess_exact, &ev.hess_gn] {
            let Some((step, mu_new)) = kkt_step(hess, &ev) else { continue };
            penalty = penalty.max(2.0 * max_abs(&mu_new) + 1e-8);
            let merit0 = ev.loss + penalty * ev.cons.iter().map(|c| c.abs()).sum::<f64>();
            // directional derivative of the L1 merit along the step
            let slope = ev.grad.dot(&step) - penalty * ev.cons.iter().map(|c| c.abs()).sum::<f64>();
            if slope > 1e-14 * (1.0 + merit0.abs()) {
                continue;
            }
            let mut t = 1.0;
            for _ in 0..=cfg.step_halving_max {
                let cand = &gamma + &step * t;
                let (l, c) = problem.loss_and_cons(&cand, link, ridge);
                let merit = l + penalty * c.iter().map(|v| v.abs()).sum::<f64>();
                if merit.is_finite() && merit <= merit0 + 1e-4 * t * slope {
                    gamma = cand;
                    mu = mu_new.clone();
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }
        ev = problem.eval(&gamma, link, ridge);
        norm = kkt_norm(&ev, &mu);
        record_best(&gamma, &ev, norm, iterations, &mut best);
    }
    if norm <= cfg.score_tolerance {
        return Ok(SolveOutcome { coefficients: gamma, converged: true, iterations, score_norm: norm });
    }
    match best {
        Some(b) => Err(Error::NonConvergence { best: Box::new(b) }),
        None => Err(Error::ConstraintInfeasible { residual: max_abs(&ev.cons) }),
    }
}

fn least_squares_multipliers(ev: &CwlsEval) -> DVector<f64> {
    // μ minimizing ‖∇L + Cᵀμ‖ at the starting point
    let cct = &ev.cjac * ev.cjac.transpose();
    solve(&cct, &(-(&ev.cjac * &ev.grad))).unwrap_or_else(|| DVector::zeros(ev.cons.len()))
}

/// Density-ratio tilt outcome with the count of clamped exponents.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltOutcome {
    pub outcome: SolveOutcome,
    pub clamped: usize,
}

fn clamp_exp(a: f64) -> (f64, bool) {
    if a > TILT_CLAMP {
        (TILT_CLAMP.exp(), true)
    } else if a < -TILT_CLAMP {
        ((-TILT_CLAMP).exp(), true)
    } else {
        (a.exp(), false)
    }
}

/// Tilt factors `exp(αᵀφ_i)` with the exponent clamped at ±30, and the
/// number of clamped rows.
pub fn tilt_factors(phi: &DMatrix<f64>, alpha: &DVector<f64>) -> (Vec<f64>, usize) {
    let eta = phi * alpha;
    let mut clamped = 0;
    let f = eta
        .iter()
        .map(|&a| {
            let (v, c) = clamp_exp(a);
            clamped += c as usize;
            v
        })
        .collect();
    (f, clamped)
}

/// Solves `normalizer⁻¹ Σ_labeled w_i φ_i exp(αᵀφ_i) − φ̄ + λα = 0` from α = 0,
/// where `phi_mean` is the full-data mean of φ.
pub fn solve_density_ratio_tilt(
    phi_labeled: &DMatrix<f64>,
    w: &[f64],
    phi_mean: &DVector<f64>,
    normalizer: f64,
    cfg: &SolverConfig,
) -> Result<TiltOutcome> {
    check_weights(w, phi_labeled.nrows())?;
    let ridge = cfg.ridge;
    let out = newton(DVector::zeros(phi_labeled.ncols()), cfg, "density-ratio tilt", |alpha, want| {
        let (f, _) = tilt_factors(phi_labeled, alpha);
        let wf: Vec<f64> = w.iter().zip(&f).map(|(a, b)| a * b).collect();
        let score = weighted_colsum(phi_labeled, &wf) / normalizer - phi_mean + alpha * ridge;
        let jac = want.then(|| {
            let mut j = weighted_crossprod(phi_labeled, &wf) / normalizer;
            for k in 0..j.nrows() {
                j[(k, k)] += ridge;
            }
            j
        });
        (score, jac)
    })?;
    let (_, clamped) = tilt_factors(phi_labeled, &out.coefficients);
    Ok(TiltOutcome { outcome: out, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn intercept_only_balanced() {
        let phi = col(&[1.0; 4]);
        let out = solve_weighted_score(&phi, &[1.0, 0.0, 1.0, 0.0], &[1.0; 4], 4.0, &Link::expit(), &SolverConfig::default(), None)
            .unwrap();
        assert!(out.coefficients[0].abs() < 1e-12);
    }

    #[test]
    fn intercept_only_matches_logit_of_mean() {
        let phi = col(&[1.0; 4]);
        let out = solve_weighted_score(&phi, &[1.0, 1.0, 1.0, 0.0], &[1.0; 4], 4.0, &Link::expit(), &SolverConfig::default(), None)
            .unwrap();
        assert!((out.coefficients[0] - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn separation_is_reported() {
        let phi = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        let err = solve_weighted_score(&phi, &[0.0, 0.0, 1.0, 1.0], &[1.0; 4], 4.0, &Link::expit(), &SolverConfig::default(), None)
            .unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }), "{err}");
        let ok = solve_weighted_score(
            &phi,
            &[0.0, 0.0, 1.0, 1.0],
            &[1.0; 4],
            4.0,
            &Link::expit(),
            &SolverConfig::default().with_ridge(0.01),
            None,
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn projection_constant_probability() {
        let x = col(&[1.0; 5]);
        let out = solve_projection(&x, &[0.3; 5], &Link::expit(), &SolverConfig::default(), None).unwrap();
        assert!((out.coefficients[0] - (0.3f64 / 0.7).ln()).abs() < 1e-9);
    }

    #[test]
    fn augmentation_zero_when_offset_fits() {
        // offsets already match both moments: two rows per z-group with mean 1/2
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let out = solve_augmentation(&z, &[0.0; 4], &[1.0, 0.0, 0.0, 1.0], &[1.0; 4], 4.0, &Link::expit(), &SolverConfig::default(), None)
            .unwrap();
        assert!(out.outcome.coefficients.norm() < 1e-12);
        assert!(!out.degenerate);
    }

    #[test]
    fn augmentation_degenerate_falls_back() {
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let out = solve_augmentation(&z, &[0.0; 3], &[1.0, 1.0, 0.0], &[1.0; 3], 3.0, &Link::expit(), &SolverConfig::default(), None)
            .unwrap();
        assert!(out.degenerate);
        assert_eq!(out.outcome.coefficients[1], 0.0);
        assert!((out.outcome.coefficients[0] - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn tilt_is_zero_for_intercept_with_unit_total() {
        let phi = col(&[1.0, 1.0]);
        let out = solve_density_ratio_tilt(&phi, &[2.0, 3.0], &DVector::from_element(1, 1.0), 5.0, &SolverConfig::default()).unwrap();
        assert!(out.outcome.coefficients[0].abs() < 1e-12);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn constrained_identity_link_is_one_step() {
        // loss Σ(y − γᵀφ)²/2n, constraint Σ(y − γᵀφ) = 0 on the intercept column
        let phi = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [0.1, 0.4, 0.4, 0.9];
        let m = phi.columns(0, 1).into_owned();
        let prob = ConstrainedProblem { phi: &phi, y: &y, loss_weights: &[1.0; 4], moments: &m, weights: &[1.0; 4], normalizer: 4.0 };
        let out = solve_constrained_wls(&prob, &Link::identity(), &SolverConfig::default(), &DVector::zeros(2)).unwrap();
        assert!(out.iterations <= 2);
        // ordinary least squares with intercept already satisfies the constraint
        let xtx = phi.transpose() * &phi;
        let ols = xtx.lu().solve(&(phi.transpose() * DVector::from_column_slice(&y))).unwrap();
        assert!((out.coefficients - ols).norm() < 1e-10);
    }
}
