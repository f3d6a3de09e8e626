//! Data generators for the simulation designs, a large-sample oracle for the
//! estimands, and the Monte Carlo harness.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use crate::basis::{BasisComponent, BasisSpec, Source};
use crate::data::SemiSupervisedDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    AccuracyEstimate, Flavor, Problem, RidgeRule, ThetaVariant, Variant,
};
use crate::link::{expit, normal_quantile, Link};
use crate::metric::{loss, AccuracyMetric, MetricKind};
use crate::pipeline::{analyze, AnalysisConfig, DesignKind, EstimatorSet};
use crate::rng::{derive_seed, stream_rng};
use crate::solver::{solve_projection, SolverConfig};

/// Simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Correct working and imputation models.
    #[serde(rename = "main-i")]
    MainI,
    /// Misspecified working model, pairwise interactions.
    #[serde(rename = "main-ii")]
    MainII,
    /// Misspecified working and imputation models, heteroscedastic extreme-value noise.
    #[serde(rename = "main-iii")]
    MainIII,
    #[serde(rename = "s4-a")]
    S4A,
    #[serde(rename = "s4-b")]
    S4B,
    #[serde(rename = "s5-I")]
    S5I,
    #[serde(rename = "s5-II")]
    S5II,
    /// Gaussian mixture with y ~ Bernoulli(0.5).
    #[serde(rename = "s8-gm")]
    S8Gm,
    #[serde(rename = "custom")]
    Custom,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 9] = [
        ScenarioId::MainI,
        ScenarioId::MainII,
        ScenarioId::MainIII,
        ScenarioId::S4A,
        ScenarioId::S4B,
        ScenarioId::S5I,
        ScenarioId::S5II,
        ScenarioId::S8Gm,
        ScenarioId::Custom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioId::MainI => "main-i",
            ScenarioId::MainII => "main-ii",
            ScenarioId::MainIII => "main-iii",
            ScenarioId::S4A => "s4-a",
            ScenarioId::S4B => "s4-b",
            ScenarioId::S5I => "s5-I",
            ScenarioId::S5II => "s5-II",
            ScenarioId::S8Gm => "s8-gm",
            ScenarioId::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::validation("scenario", format!("unknown scenario '{s}'")))
    }
}

/// Latent noise family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Noise {
    Logistic,
    /// Gumbel for maxima with the given location and scale.
    ExtremeValue { location: f64, scale: f64 },
}

impl Noise {
    pub const EXTREME: Noise = Noise::ExtremeValue { location: -2.0, scale: 0.3 };

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        match *self {
            Noise::Logistic => (u / (1.0 - u)).ln(),
            Noise::ExtremeValue { location, scale } => location - scale * (-u.ln()).ln(),
        }
    }

    /// P(η + σε > t).
    pub fn exceedance(&self, eta: f64, sigma: f64, t: f64) -> f64 {
        let z = (t - eta) / sigma;
        match *self {
            Noise::Logistic => expit(-z),
            Noise::ExtremeValue { location, scale } => -(-(-(z - location) / scale).exp()).exp_m1(),
        }
    }
}

/// User-defined linear-logistic design on the main covariate structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CustomScenario {
    pub p: usize,
    /// Intercept first, then p slopes.
    pub theta: Vec<f64>,
    pub noise: Noise,
    /// y = I(θᵀx + ε > threshold).
    pub threshold: f64,
    pub variance: f64,
    pub correlation: f64,
    /// Stratum 1 when x₁ + δ > cut; ignored for a single stratum.
    pub stratum_cut: f64,
}

impl Default for CustomScenario {
    fn default() -> Self {
        CustomScenario {
            p: 4,
            theta: vec![-1.0, 1.0, 1.0, 0.5, 0.5],
            noise: Noise::Logistic,
            threshold: 0.0,
            variance: 1.0,
            correlation: 0.4,
            stratum_cut: 0.5,
        }
    }
}

/// How the labeled set is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Sampling {
    /// Fixed count per stratum; one entry is broadcast to every stratum.
    Stratified { n_per_stratum: Vec<usize> },
    /// Simple random sample of n units.
    Uniform { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Number of strata; 2 or 4 for the main designs, 2 elsewhere (1 or 2 for custom).
    pub strata: usize,
    pub sampling: Sampling,
    pub big_n: usize,
    pub replications: usize,
    pub seed: u64,
    /// Imputation basis; the scenario's own when absent.
    pub basis: Option<BasisSpec>,
    /// OMR threshold c.
    pub threshold: f64,
    pub custom: Option<CustomScenario>,
    /// Draws used by the oracle.
    pub oracle_size: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::preset(ScenarioId::MainI)
    }
}

/// Main covariate covariance 3·0.4^|k−l|.
const MAIN_P: usize = 10;
const MAIN_VARIANCE: f64 = 3.0;
const MAIN_CORRELATION: f64 = 0.4;
const MAIN_THETA: [f64; 11] = [0.0, 1.0, 1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const GM_MU: [f64; 10] = [0.2, -0.2, 0.2, -0.2, 0.2, -0.2, 0.1, -0.1, 0.0, 0.0];
const ORACLE_SEED: u64 = 0x5EED_0FAC_1E00;

impl ScenarioSpec {
    /// Paper-scale defaults for `id`.
    pub fn preset(id: ScenarioId) -> Self {
        let (sampling, custom) = match id {
            ScenarioId::MainI | ScenarioId::MainII | ScenarioId::MainIII | ScenarioId::S8Gm => {
                (Sampling::Stratified { n_per_stratum: vec![100] }, None)
            }
            ScenarioId::S4A | ScenarioId::S4B => (Sampling::Stratified { n_per_stratum: vec![200] }, None),
            ScenarioId::S5I | ScenarioId::S5II => (Sampling::Stratified { n_per_stratum: vec![200] }, None),
            ScenarioId::Custom => (Sampling::Stratified { n_per_stratum: vec![100] }, Some(CustomScenario::default())),
        };
        ScenarioSpec {
            id,
            strata: 2,
            sampling,
            big_n: 20_000,
            replications: 500,
            seed: 1,
            basis: None,
            threshold: 0.5,
            custom,
            oracle_size: 2_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let allowed: &[usize] = match self.id {
            ScenarioId::MainI | ScenarioId::MainII | ScenarioId::MainIII => &[2, 4],
            ScenarioId::Custom => &[1, 2],
            _ => &[2],
        };
        if !allowed.contains(&self.strata) {
            return Err(Error::validation("strata", format!("{} strata not defined for {}", self.strata, self.id.name())));
        }
        match &self.sampling {
            Sampling::Stratified { n_per_stratum } => {
                if !(n_per_stratum.len() == 1 || n_per_stratum.len() == self.strata) || n_per_stratum.contains(&0) {
                    return Err(Error::validation("sampling.n_per_stratum", "one positive count, or one per stratum"));
                }
            }
            Sampling::Uniform { n } if *n == 0 => return Err(Error::validation("sampling.n", "must be positive")),
            _ => {}
        }
        if self.big_n < 10 {
            return Err(Error::validation("big_n", "too small"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::validation("threshold", format!("{} is outside (0, 1)", self.threshold)));
        }
        if self.oracle_size < 1000 {
            return Err(Error::validation("oracle_size", "must be at least 1000"));
        }
        if self.id == ScenarioId::Custom {
            let c = self.custom.as_ref().ok_or_else(|| Error::validation("custom", "required for the custom scenario"))?;
            if c.p == 0 || c.theta.len() != c.p + 1 {
                return Err(Error::validation("custom.theta", "needs p + 1 entries"));
            }
            if !(c.variance > 0.0) || !(c.correlation.abs() < 1.0) {
                return Err(Error::validation("custom", "variance must be positive and |correlation| < 1"));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        match self.id {
            ScenarioId::S4A | ScenarioId::S4B => 2,
            ScenarioId::Custom => self.custom.as_ref().map_or(0, |c| c.p),
            _ => MAIN_P,
        }
    }

    /// Labeled counts per stratum, when stratified.
    pub fn n_per_stratum(&self) -> Option<Vec<usize>> {
        match &self.sampling {
            Sampling::Stratified { n_per_stratum } if n_per_stratum.len() == 1 => Some(vec![n_per_stratum[0]; self.strata]),
            Sampling::Stratified { n_per_stratum } => Some(n_per_stratum.clone()),
            Sampling::Uniform { .. } => None,
        }
    }

    pub fn metrics(&self) -> Vec<AccuracyMetric> {
        vec![AccuracyMetric::brier(), AccuracyMetric { kind: MetricKind::Omr, threshold: self.threshold }]
    }

    /// The scenario's imputation basis.
    pub fn default_basis(&self) -> BasisSpec {
        let p = self.p();
        match self.id {
            ScenarioId::MainI | ScenarioId::MainIII | ScenarioId::S5II | ScenarioId::S8Gm => BasisSpec::spline_with_strata(3),
            ScenarioId::MainII => BasisSpec::interactions_with_strata(p),
            ScenarioId::S4A | ScenarioId::S4B => BasisSpec::new(vec![
                BasisComponent::Intercept,
                BasisComponent::Raw { source: Source::Features, indices: None },
                BasisComponent::Interactions { pairs: vec![(0, 1)] },
            ]),
            ScenarioId::S5I => {
                let inner = vec![
                    BasisComponent::Raw { source: Source::Features, indices: None },
                    BasisComponent::Interactions { pairs: BasisSpec::leading_interactions(p) },
                ];
                let mut comps = vec![BasisComponent::Intercept, BasisComponent::StratumIndicators];
                comps.extend(inner.iter().cloned());
                comps.push(BasisComponent::StratumProducts { inner });
                BasisSpec::new(comps)
            }
            ScenarioId::Custom => {
                let mut b = BasisSpec::linear();
                if self.strata > 1 {
                    b.components.push(BasisComponent::StratumIndicators);
                }
                b
            }
        }
    }

    /// Estimator configuration used for this scenario by the study harness.
    pub fn default_analysis(&self) -> AnalysisConfig {
        let mut cfg = AnalysisConfig {
            basis: self.basis.clone().unwrap_or_else(|| self.default_basis()),
            metrics: self.metrics(),
            ..AnalysisConfig::default()
        };
        if self.strata == 4 {
            cfg.cv.folds = 3;
        }
        match self.id {
            ScenarioId::MainI | ScenarioId::MainII | ScenarioId::MainIII => {
                cfg.estimators = EstimatorSet { dr: true, ..EstimatorSet::default() };
            }
            ScenarioId::S4A | ScenarioId::S4B => {
                cfg.ridge = RidgeRule::Fixed(0.0);
                cfg.estimators = EstimatorSet { intrinsic: true, cross_validated: false, ..EstimatorSet::default() };
                cfg.perturbation = None;
            }
            _ => {
                cfg.estimators = EstimatorSet { cross_validated: false, ..EstimatorSet::default() };
                cfg.perturbation = None;
            }
        }
        cfg
    }
}

/// A full finite population.
#[derive(Debug, Clone)]
pub struct Population {
    pub features: DMatrix<f64>,
    pub strata: Vec<usize>,
    /// P(y = 1 | covariates, stratum).
    pub prob: Vec<f64>,
    pub outcomes: Vec<f64>,
}

fn ar1_cholesky(p: usize, variance: f64, rho: f64) -> Result<DMatrix<f64>> {
    let c = DMatrix::from_fn(p, p, |k, l| variance * rho.powi((k as i32 - l as i32).abs()));
    Ok(Cholesky::new(c).ok_or_else(|| Error::validation("covariance", "not positive definite"))?.l())
}

fn correlated<R: Rng + ?Sized>(rng: &mut R, l: &DMatrix<f64>, out: &mut [f64]) {
    let p = l.nrows();
    let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    for k in 0..p {
        out[k] = (0..=k).map(|j| l[(k, j)] * z[j]).sum();
    }
}

fn dot_theta(theta: &[f64], x: &[f64]) -> f64 {
    theta[0] + x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Log density of N(mean, LLᵀ) up to a shared constant.
fn mvn_log_density(x: &[f64], mean: &[f64], l: &DMatrix<f64>) -> f64 {
    let p = x.len();
    let mut z = vec![0.0; p];
    for k in 0..p {
        let s: f64 = (0..k).map(|j| l[(k, j)] * z[j]).sum();
        z[k] = (x[k] - mean[k] - s) / l[(k, k)];
    }
    let logdet: f64 = (0..p).map(|k| l[(k, k)].ln()).sum();
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - logdet
}

struct Generator {
    id: ScenarioId,
    strata: usize,
    p: usize,
    chol: DMatrix<f64>,
    chol1: Option<DMatrix<f64>>,
    custom: Option<CustomScenario>,
}

impl Generator {
    fn new(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let (chol, chol1) = match spec.id {
            ScenarioId::S4A | ScenarioId::S4B => (ar1_cholesky(3, 1.0, 0.4)?, None),
            ScenarioId::S8Gm => {
                let s0 = DMatrix::from_fn(10, 10, |k, l| 0.2f64.powi((k as i32 - l as i32).abs()));
                let s1 = DMatrix::from_fn(10, 10, |k, l| {
                    let d = (k as i32 - l as i32).abs();
                    s0[(k, l)] + 0.3f64.powi(d) + if k == l { -0.4 } else { 0.2 }
                });
                let c0 = Cholesky::new(s0).expect("positive definite").l();
                let c1 = Cholesky::new(s1).ok_or_else(|| Error::validation("covariance", "mixture covariance not positive definite"))?.l();
                (c0, Some(c1))
            }
            ScenarioId::Custom => {
                let c = spec.custom.as_ref().unwrap();
                (ar1_cholesky(c.p, c.variance, c.correlation)?, None)
            }
            _ => (ar1_cholesky(MAIN_P, MAIN_VARIANCE, MAIN_CORRELATION)?, None),
        };
        Ok(Generator { id: spec.id, strata: spec.strata, p: spec.p(), chol, chol1, custom: spec.custom.clone() })
    }

    /// Draws one unit into `x`, returning (stratum, P(y=1), y).
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64]) -> (usize, f64, f64) {
        let logistic = Noise::Logistic;
        match self.id {
            ScenarioId::MainI | ScenarioId::MainII | ScenarioId::MainIII => {
                correlated(rng, &self.chol, x);
                let d1: f64 = rng.sample(StandardNormal);
                let mut s = 1 + (x[0] + d1 <= 0.5) as usize;
                if self.strata == 4 {
                    let d2: f64 = rng.sample(StandardNormal);
                    s += 2 * (x[2] + d2 <= 0.5) as usize;
                }
                let lin = dot_theta(&MAIN_THETA, x);
                let (eta, sigma, t, noise) = match self.id {
                    ScenarioId::MainI => (lin, 1.0, 2.0, logistic),
                    ScenarioId::MainII => {
                        let extra = x[0] * x[1] + x[0] * x[4] - x[1] * x[5] - (s == 1) as u8 as f64;
                        (lin + 0.5 * extra, 1.0, 0.0, logistic)
                    }
                    _ => (lin + x[0] * x[0] + x[2] * x[2], (-2.0 - 3.0 * x[3] - 3.0 * x[5]).exp(), 2.0, Noise::EXTREME),
                };
                let e = noise.draw(rng);
                (s, noise.exceedance(eta, sigma, t), (eta + sigma * e > t) as u8 as f64)
            }
            ScenarioId::S4A | ScenarioId::S4B => {
                let mut v = [0.0; 3];
                correlated(rng, &self.chol, &mut v);
                x[0] = v[0];
                x[1] = v[1];
                let s = 1 + (v[2] >= 1.0) as usize;
                let eta = if self.id == ScenarioId::S4A {
                    let sign = if s == 1 { 1.0 } else { -1.0 };
                    2.0 * v[0] - 2.0 * v[1] + 5.0 * sign * v[0] * v[1]
                } else {
                    s as f64 * (v[0] - v[1]) + 1.5 * v[0] * v[1]
                };
                let e = logistic.draw(rng);
                (s, logistic.exceedance(eta, 1.0, 0.0), (eta + e > 0.0) as u8 as f64)
            }
            ScenarioId::S5I | ScenarioId::S5II => {
                correlated(rng, &self.chol, x);
                let d: f64 = rng.sample(StandardNormal);
                let s = 1 + (x[0] + x[1] + d >= 1.5) as usize;
                let lin = dot_theta(&MAIN_THETA, x);
                let (mu, sigma, noise) = if self.id == ScenarioId::S5I {
                    (lin + 0.5 * (x[0] * x[1] + x[0] * x[4] - x[1] * x[5]), 1.0, logistic)
                } else {
                    (lin + x[0] * x[0] + x[2] * x[2], (-2.0 - 3.0 * x[3] - 3.0 * x[5]).exp(), Noise::EXTREME)
                };
                let eta = if s == 1 { 0.8 * mu - 5.0 } else { mu };
                let e = noise.draw(rng);
                (s, noise.exceedance(eta, sigma, 1.0), (eta + sigma * e > 1.0) as u8 as f64)
            }
            ScenarioId::S8Gm => {
                let y = rng.random::<bool>() as u8 as f64;
                let l = if y == 1.0 { self.chol1.as_ref().unwrap() } else { &self.chol };
                let mut w = [0.0; 10];
                correlated(rng, l, &mut w);
                for k in 0..10 {
                    w[k] += y * GM_MU[k];
                }
                let d1: f64 = rng.sample(StandardNormal);
                let s = if w[2] + d1 < 0.5 { 1 } else { 2 };
                for k in 0..10 {
                    let power = if [2, 3, 6, 7].contains(&k) { 3 } else { 0 };
                    x[k] = w[k] + 0.12 * w[k].powi(power);
                }
                let l0 = mvn_log_density(&w, &[0.0; 10], &self.chol);
                let l1 = mvn_log_density(&w, &GM_MU, self.chol1.as_ref().unwrap());
                (s, expit(l1 - l0), y)
            }
            ScenarioId::Custom => {
                let c = self.custom.as_ref().unwrap();
                correlated(rng, &self.chol, x);
                let s = if self.strata == 1 {
                    1
                } else {
                    let d1: f64 = rng.sample(StandardNormal);
                    1 + (x[0] + d1 <= c.stratum_cut) as usize
                };
                let eta = dot_theta(&c.theta, x);
                let e = c.noise.draw(rng);
                (s, c.noise.exceedance(eta, 1.0, c.threshold), (eta + e > c.threshold) as u8 as f64)
            }
        }
    }

    fn population(&self, size: usize, seed: u64, stream: u64) -> Population {
        let mut rng = stream_rng(seed, stream);
        let mut features = DMatrix::zeros(size, self.p);
        let mut strata = Vec::with_capacity(size);
        let mut prob = Vec::with_capacity(size);
        let mut outcomes = Vec::with_capacity(size);
        let mut x = vec![0.0; self.p.max(10)];
        for i in 0..size {
            let (s, pr, y) = self.draw(&mut rng, &mut x);
            for k in 0..self.p {
                features[(i, k)] = x[k];
            }
            strata.push(s);
            prob.push(pr);
            outcomes.push(y);
        }
        Population { features, strata, prob, outcomes }
    }
}

/// Draws a population of `spec.big_n` units under `seed`.
pub fn generate_population(spec: &ScenarioSpec, seed: u64) -> Result<Population> {
    Ok(Generator::new(spec)?.population(spec.big_n, seed, 0))
}

/// A generated dataset with the full outcome vector kept for diagnostics.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: SemiSupervisedDataset,
    pub population: Population,
}

/// Draws a labeled set from `pop` under `sampling`.
pub fn draw_labeled(pop: &Population, strata: usize, sampling: &Sampling, seed: u64) -> Result<SemiSupervisedDataset> {
    let big_n = pop.strata.len();
    let mut rng = stream_rng(seed, 1);
    let mut mask = vec![false; big_n];
    match sampling {
        Sampling::Stratified { n_per_stratum } => {
            for s in 1..=strata {
                let n_s = if n_per_stratum.len() == 1 { n_per_stratum[0] } else { n_per_stratum[s - 1] };
                let members: Vec<usize> = (0..big_n).filter(|&i| pop.strata[i] == s).collect();
                if members.len() < n_s {
                    return Err(Error::validation(
                        "sampling.n_per_stratum",
                        format!("stratum {s} has {} units, fewer than {n_s}", members.len()),
                    ));
                }
                for k in sample(&mut rng, members.len(), n_s) {
                    mask[members[k]] = true;
                }
            }
        }
        Sampling::Uniform { n } => {
            if *n > big_n {
                return Err(Error::validation("sampling.n", "exceeds the population size"));
            }
            for k in sample(&mut rng, big_n, *n) {
                mask[k] = true;
            }
        }
    }
    let outcomes: Vec<f64> = (0..big_n).filter(|&i| mask[i]).map(|i| pop.outcomes[i]).collect();
    let names = (1..=pop.features.ncols()).map(|k| format!("x{k}")).collect();
    SemiSupervisedDataset::new(pop.features.clone(), pop.strata.clone(), mask, outcomes)?.with_feature_names(names)
}

/// Population plus labeled set for one replicate.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Generated> {
    let population = generate_population(spec, seed)?;
    let dataset = draw_labeled(&population, spec.strata, &spec.sampling, seed)?;
    Ok(Generated { dataset, population })
}

/// Limiting working-model coefficients and accuracy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta: Vec<f64>,
    pub accuracy: Vec<(AccuracyMetric, f64)>,
    pub prevalence: f64,
    pub oracle_size: usize,
}

impl Truth {
    pub fn accuracy_of(&self, metric: &AccuracyMetric) -> Option<f64> {
        self.accuracy.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }
}

fn oracle_key(spec: &ScenarioSpec) -> String {
    let custom = spec.custom.as_ref().filter(|_| spec.id == ScenarioId::Custom).map(|c| serde_json::to_string(c).unwrap_or_default());
    format!("{}-S{}-M{}-c{}-{}", spec.id.name(), spec.strata, spec.oracle_size, spec.threshold, custom.unwrap_or_default())
}

fn oracle_cache_path(key: &str) -> PathBuf {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    std::env::temp_dir().join("stratssl-oracle").join(format!("v1-{h:016x}.json"))
}

/// Solves the population estimating equation on `spec.oracle_size` draws,
/// using P(y=1|·) in place of y. Results are memoized in-process and cached
/// under the system temp directory.
pub fn oracle(spec: &ScenarioSpec) -> Result<Truth> {
    static MEMO: OnceLock<Mutex<HashMap<String, Truth>>> = OnceLock::new();
    let key = oracle_key(spec);
    let memo = MEMO.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = memo.lock().unwrap().get(&key) {
        return Ok(t.clone());
    }
    let path = oracle_cache_path(&key);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok((k, t)) = serde_json::from_str::<(String, Truth)>(&text) {
            if k == key {
                memo.lock().unwrap().insert(key, t.clone());
                return Ok(t);
            }
        }
    }
    let truth = compute_oracle(spec)?;
    if let Some(dir) = path.parent() {
        if std::fs::create_dir_all(dir).is_ok() {
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            if std::fs::write(&tmp, serde_json::to_string(&(&key, &truth))?).is_ok() {
                let _ = std::fs::rename(&tmp, &path);
            }
        }
    }
    memo.lock().unwrap().insert(key, truth.clone());
    Ok(truth)
}

fn compute_oracle(spec: &ScenarioSpec) -> Result<Truth> {
    let gen = Generator::new(spec)?;
    let pop = gen.population(spec.oracle_size, ORACLE_SEED, 7);
    let size = pop.prob.len();
    let x = pop.features.clone().insert_column(0, 1.0);
    let link = Link::expit();
    let theta = solve_projection(&x, &pop.prob, &link, &SolverConfig::default(), None)?.coefficients;
    let eta = &x * &theta;
    let accuracy = spec
        .metrics()
        .into_iter()
        .map(|m| {
            let v = (0..size)
                .map(|i| {
                    let z = m.predict(&link, eta[i]);
                    pop.prob[i] * (1.0 - 2.0 * z) + z * z
                })
                .sum::<f64>()
                / size as f64;
            (m, v)
        })
        .collect();
    Ok(Truth {
        theta: theta.iter().cloned().collect(),
        accuracy,
        prevalence: pop.prob.iter().sum::<f64>() / size as f64,
        oracle_size: size,
    })
}

/// One replicate's estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub error: Option<String>,
    pub accuracy: Vec<AccuracyRecord>,
    pub theta: Vec<ThetaRecord>,
    pub warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub metric: AccuracyMetric,
    pub variant: Variant,
    pub flavor: Flavor,
    pub value: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl From<&AccuracyEstimate> for AccuracyRecord {
    fn from(e: &AccuracyEstimate) -> Self {
        AccuracyRecord { metric: e.metric, variant: e.variant, flavor: e.flavor, value: e.value, se: e.se, ci: e.ci }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRecord {
    pub variant: ThetaVariant,
    pub coefficients: Vec<f64>,
    pub ase: Option<Vec<f64>>,
}

/// Per-replicate seed.
pub fn replicate_seed(spec: &ScenarioSpec, r: usize) -> u64 {
    derive_seed(spec.seed, r as u64)
}

/// Generates replicate `r` and runs `cfg` on it.
pub fn run_replicate(spec: &ScenarioSpec, cfg: &AnalysisConfig, r: usize) -> ReplicateRecord {
    let seed = replicate_seed(spec, r);
    let mut cfg = cfg.clone();
    cfg.cv.seed = derive_seed(seed, 1);
    if let Some(p) = cfg.perturbation.as_mut() {
        p.seed = derive_seed(seed, 2);
    }
    let result = generate(spec, seed).and_then(|g| analyze(&g.dataset, &cfg));
    match result {
        Ok(a) => {
            let mut theta: Vec<ThetaRecord> = a
                .theta
                .iter()
                .map(|t| ThetaRecord { variant: t.variant, coefficients: t.coefficients.iter().cloned().collect(), ase: t.ase.clone() })
                .collect();
            if !a.intrinsic_theta.is_empty() {
                theta.push(ThetaRecord {
                    variant: ThetaVariant::Intrinsic,
                    coefficients: a.intrinsic_theta.iter().map(|f| f.value).collect(),
                    ase: None,
                });
            }
            ReplicateRecord {
                replicate: r,
                error: None,
                accuracy: a.accuracy.iter().map(AccuracyRecord::from).collect(),
                theta,
                warnings: a.warnings.len(),
            }
        }
        Err(e) => ReplicateRecord { replicate: r, error: Some(e.to_string()), accuracy: Vec::new(), theta: Vec::new(), warnings: 0 },
    }
}

/// Summary of one accuracy estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub metric: AccuracyMetric,
    pub variant: Variant,
    pub flavor: Flavor,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// 100 × bias / truth.
    pub percent_bias: f64,
    pub ese: f64,
    pub ase: Option<f64>,
    pub cp: Option<f64>,
    /// ESE² of the supervised estimator of the same flavor over ESE².
    pub re_vs_sl: Option<f64>,
    pub count: usize,
    pub convention: String,
}

/// Summary of one θ coordinate across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCell {
    pub variant: ThetaVariant,
    pub coordinate: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub ese: f64,
    pub mse: f64,
    pub ase: Option<f64>,
    pub cp: Option<f64>,
    /// MSE of the supervised estimator over MSE.
    pub re_vs_sl: Option<f64>,
    pub count: usize,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub scenario: ScenarioSpec,
    pub truth: Truth,
    pub replicates: usize,
    pub completed: usize,
    pub dropped: Vec<(usize, String)>,
    pub accuracy: Vec<AccuracyCell>,
    pub theta: Vec<ThetaCell>,
}

impl MonteCarloReport {
    pub fn accuracy_cell(&self, metric: MetricKind, variant: Variant, flavor: Flavor) -> Option<&AccuracyCell> {
        self.accuracy.iter().find(|c| c.metric.kind == metric && c.variant == variant && c.flavor == flavor)
    }

    pub fn theta_cell(&self, variant: ThetaVariant, coordinate: usize) -> Option<&ThetaCell> {
        self.theta.iter().find(|c| c.variant == variant && c.coordinate == coordinate)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates replicate records against `truth`.
pub fn summarize(spec: &ScenarioSpec, truth: &Truth, records: &[ReplicateRecord], level: f64) -> MonteCarloReport {
    let mut records: Vec<&ReplicateRecord> = records.iter().collect();
    records.sort_by_key(|r| r.replicate);
    let ok: Vec<&ReplicateRecord> = records.iter().copied().filter(|r| r.error.is_none()).collect();
    let dropped = records.iter().filter_map(|r| r.error.as_ref().map(|e| (r.replicate, e.clone()))).collect();
    let z = normal_quantile(0.5 + level / 2.0);

    let mut keys: Vec<(AccuracyMetric, Variant, Flavor)> = Vec::new();
    for r in &ok {
        for a in &r.accuracy {
            let k = (a.metric, a.variant, a.flavor);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let mut accuracy: Vec<AccuracyCell> = Vec::new();
    for (metric, variant, flavor) in keys {
        let Some(t) = truth.accuracy_of(&metric) else { continue };
        let recs: Vec<&AccuracyRecord> = ok
            .iter()
            .filter_map(|r| r.accuracy.iter().find(|a| a.metric == metric && a.variant == variant && a.flavor == flavor))
            .collect();
        let values: Vec<f64> = recs.iter().map(|a| a.value).collect();
        let ses: Vec<f64> = recs.iter().filter_map(|a| a.se).collect();
        let cis: Vec<(f64, f64)> = recs.iter().filter_map(|a| a.ci).collect();
        let m = mean(&values);
        accuracy.push(AccuracyCell {
            metric,
            variant,
            flavor,
            truth: t,
            mean: m,
            bias: m - t,
            percent_bias: 100.0 * (m - t) / t,
            ese: sd(&values),
            ase: (!ses.is_empty()).then(|| mean(&ses)),
            cp: (!cis.is_empty()).then(|| cis.iter().filter(|(lo, hi)| *lo <= t && t <= *hi).count() as f64 / cis.len() as f64),
            re_vs_sl: None,
            count: values.len(),
            convention: "variance".into(),
        });
    }
    let snapshot = accuracy.clone();
    for c in &mut accuracy {
        if let Some(sl) = snapshot.iter().find(|s| s.metric == c.metric && s.flavor == c.flavor && s.variant == Variant::Sl) {
            c.re_vs_sl = Some(sl.ese.powi(2) / c.ese.powi(2));
        }
    }

    let mut theta: Vec<ThetaCell> = Vec::new();
    let mut variants: Vec<ThetaVariant> = Vec::new();
    for r in &ok {
        for t in &r.theta {
            if !variants.contains(&t.variant) {
                variants.push(t.variant);
            }
        }
    }
    for variant in variants {
        let recs: Vec<&ThetaRecord> = ok.iter().filter_map(|r| r.theta.iter().find(|t| t.variant == variant)).collect();
        let dim = recs.first().map_or(0, |t| t.coefficients.len());
        for j in 0..dim.min(truth.theta.len()) {
            let t = truth.theta[j];
            let values: Vec<f64> = recs.iter().map(|r| r.coefficients[j]).collect();
            let ases: Vec<f64> = recs.iter().filter_map(|r| r.ase.as_ref().map(|a| a[j])).collect();
            let covered = recs
                .iter()
                .filter_map(|r| r.ase.as_ref().map(|a| ((r.coefficients[j] - t).abs() <= z * a[j]) as usize))
                .collect::<Vec<_>>();
            let m = mean(&values);
            theta.push(ThetaCell {
                variant,
                coordinate: j,
                truth: t,
                mean: m,
                bias: m - t,
                ese: sd(&values),
                mse: mean(&values.iter().map(|v| (v - t).powi(2)).collect::<Vec<_>>()),
                ase: (!ases.is_empty()).then(|| mean(&ases)),
                cp: (!covered.is_empty()).then(|| covered.iter().sum::<usize>() as f64 / covered.len() as f64),
                re_vs_sl: None,
                count: values.len(),
                convention: "mse".into(),
            });
        }
    }
    let snapshot = theta.clone();
    for c in &mut theta {
        if let Some(sl) = snapshot.iter().find(|s| s.variant == ThetaVariant::Sl && s.coordinate == c.coordinate) {
            c.re_vs_sl = Some(sl.mse / c.mse);
        }
    }

    MonteCarloReport {
        scenario: spec.clone(),
        truth: truth.clone(),
        replicates: records.len(),
        completed: ok.len(),
        dropped,
        accuracy,
        theta,
    }
}

/// Run-time options for [`run_study`].
#[derive(Debug, Clone, Default)]
pub struct StudyOptions {
    /// JSONL file holding finished replicates; resumed when present.
    pub checkpoint: Option<PathBuf>,
    /// Print one line per finished replicate to stderr.
    pub progress: bool,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CheckpointHeader {
    scenario: ScenarioSpec,
    analysis: AnalysisConfig,
}

fn read_checkpoint(path: &Path, header: &CheckpointHeader) -> Result<Vec<ReplicateRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut lines = BufReader::new(file).lines();
    let Some(first) = lines.next() else { return Ok(Vec::new()) };
    let found: CheckpointHeader = serde_json::from_str(&first?)?;
    if found != *header {
        return Err(Error::validation("checkpoint", format!("{} was written for a different study", path.display())));
    }
    let mut out = Vec::new();
    for line in lines {
        // a torn final line from an interrupted run is skipped
        if let Ok(r) = serde_json::from_str::<ReplicateRecord>(&line?) {
            out.push(r);
        }
    }
    Ok(out)
}

/// Runs `spec.replications` replicates of `cfg`, in parallel, and summarizes
/// them against the oracle truth. Finished replicates are appended to the
/// checkpoint so an interrupted study resumes where it stopped.
pub fn run_study(spec: &ScenarioSpec, cfg: &AnalysisConfig, opts: &StudyOptions) -> Result<MonteCarloReport> {
    spec.validate()?;
    cfg.validate()?;
    let truth = oracle(spec)?;
    let header = CheckpointHeader { scenario: spec.clone(), analysis: cfg.clone() };
    let mut records = match &opts.checkpoint {
        Some(p) => read_checkpoint(p, &header)?,
        None => Vec::new(),
    };
    records.retain(|r| r.replicate < spec.replications);
    records.sort_by_key(|r| r.replicate);
    records.dedup_by_key(|r| r.replicate);
    let done: std::collections::HashSet<usize> = records.iter().map(|r| r.replicate).collect();
    let todo: Vec<usize> = (0..spec.replications).filter(|r| !done.contains(r)).collect();

    let sink = match &opts.checkpoint {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{}", serde_json::to_string(&header)?)?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };
    let new: Vec<Result<ReplicateRecord>> = todo
        .par_iter()
        .map(|&r| {
            let rec = run_replicate(spec, cfg, r);
            if let Some(s) = &sink {
                let mut f = s.lock().unwrap();
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
                f.flush()?;
            }
            if opts.progress {
                eprintln!("{} replicate {} {}", spec.id.name(), r, rec.error.as_deref().unwrap_or("ok"));
            }
            Ok(rec)
        })
        .collect();
    for r in new {
        records.push(r?);
    }
    let level = cfg.perturbation.as_ref().map_or(cfg.level, |p| p.level);
    Ok(summarize(spec, &truth, &records, level))
}

/// Study-size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Two replicates with light resampling, for plumbing checks.
    Smoke,
    /// 200 replicates, 300 perturbations.
    Desk,
    /// 500 replicates, 500 perturbations.
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::validation("profile", format!("unknown profile '{s}'"))),
        }
    }

    pub fn apply(&self, spec: &mut ScenarioSpec, cfg: &mut AnalysisConfig) {
        let (reps, b) = match self {
            Profile::Smoke => (2, 20),
            Profile::Desk => (200, 300),
            Profile::Full => (500, 500),
        };
        spec.replications = reps;
        if let Some(p) = cfg.perturbation.as_mut() {
            p.replicates = b;
        }
        if *self == Profile::Smoke {
            cfg.cv.replications = 2;
            spec.oracle_size = spec.oracle_size.min(200_000);
        }
    }
}

/// Relative efficiencies of stratified versus uniform sampling and the bias of
/// the naive unweighted supervised estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignComparison {
    pub scenario: ScenarioSpec,
    pub budget: usize,
    pub replications: usize,
    pub truth: Truth,
    pub rows: Vec<DesignRow>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub metric: AccuracyMetric,
    /// Var(uniform)/Var(stratified) for the supervised estimator.
    pub re_sl: f64,
    pub re_ssl: f64,
    /// Mean bias under stratified sampling.
    pub bias_sl: f64,
    pub bias_ssl: f64,
    /// Mean bias of the unweighted supervised estimator on the stratified sample.
    pub bias_naive: f64,
    /// Mean bias under uniform sampling.
    pub bias_sl_uniform: f64,
    pub bias_ssl_uniform: f64,
}

/// Compares uniform sampling of `budget` units with stratified sampling of
/// `budget / S` per stratum, using ensemble estimators with `cv_replications`
/// CV replications.
pub fn compare_designs(spec: &ScenarioSpec, budget: usize, replications: usize, cv_replications: usize) -> Result<DesignComparison> {
    spec.validate()?;
    if !matches!(spec.id, ScenarioId::S5I | ScenarioId::S5II | ScenarioId::Custom) {
        return Err(Error::validation("scenario", "design comparison supports s5-I, s5-II and custom"));
    }
    if budget < 2 * spec.strata {
        return Err(Error::validation("budget", "too small"));
    }
    let truth = oracle(spec)?;
    let mut base = spec.default_analysis();
    base.estimators = EstimatorSet::default();
    base.perturbation = None;
    base.cv.replications = cv_replications;
    base.validate()?;
    let metrics = spec.metrics();

    type Values = Vec<[f64; 5]>;
    let per_rep: Vec<Option<Values>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let seed = replicate_seed(spec, r);
            let pop = generate_population(spec, seed).ok()?;
            let strat = draw_labeled(&pop, spec.strata, &Sampling::Stratified { n_per_stratum: vec![budget / spec.strata] }, seed).ok()?;
            let unif = draw_labeled(&pop, spec.strata, &Sampling::Uniform { n: budget }, derive_seed(seed, 3)).ok()?;
            let mut cfg = base.clone();
            cfg.cv.seed = derive_seed(seed, 1);
            let a_strat = analyze(&strat, &cfg).ok()?;
            let a_unif = analyze(&unif, &AnalysisConfig { design: DesignKind::Uniform, ..cfg.clone() }).ok()?;
            let a_naive = analyze(&strat, &AnalysisConfig { design: DesignKind::Uniform, ..cfg.clone() }).ok()?;
            metrics
                .iter()
                .map(|m| {
                    let get = |a: &crate::pipeline::Analysis, v| a.estimate(m, v, Flavor::Ensemble).map(|e| e.value);
                    Some([
                        get(&a_strat, Variant::Sl)?,
                        get(&a_strat, Variant::Ssl)?,
                        get(&a_unif, Variant::Sl)?,
                        get(&a_unif, Variant::Ssl)?,
                        get(&a_naive, Variant::Sl)?,
                    ])
                })
                .collect()
        })
        .collect();
    let ok: Vec<Values> = per_rep.iter().flatten().cloned().collect();
    let failures = replications - ok.len();
    if ok.len() < 2 {
        return Err(Error::TooManyFailures { failed: failures, total: replications });
    }
    let rows = metrics
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let col = |c: usize| ok.iter().map(|v| v[k][c]).collect::<Vec<f64>>();
            let t = truth.accuracy_of(m).unwrap();
            DesignRow {
                metric: *m,
                re_sl: sd(&col(2)).powi(2) / sd(&col(0)).powi(2),
                re_ssl: sd(&col(3)).powi(2) / sd(&col(1)).powi(2),
                bias_sl: mean(&col(0)) - t,
                bias_ssl: mean(&col(1)) - t,
                bias_naive: mean(&col(4)) - t,
                bias_sl_uniform: mean(&col(2)) - t,
                bias_ssl_uniform: mean(&col(3)) - t,
            }
        })
        .collect();
    Ok(DesignComparison { scenario: spec.clone(), budget, replications, truth, rows, failures })
}

/// Pilot estimate of per-stratum influence SDs for the supervised estimator
/// of `metric`, from one labeled sample of `spec`.
pub fn pilot_stratum_sds(spec: &ScenarioSpec, seed: u64, metric: &AccuracyMetric) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = generate(spec, seed)?;
    crate::pipeline::pilot_stratum_sds(&g.dataset, &spec.default_analysis(), metric)
}

/// Problem built with the scenario's defaults; exposed for diagnostics.
pub fn scenario_problem(spec: &ScenarioSpec, seed: u64) -> Result<Problem> {
    let g = generate(spec, seed)?;
    Ok(crate::pipeline::build_problem(&g.dataset, &spec.default_analysis())?.0)
}

/// Monte Carlo loss of a fixed rule on a population, for sanity checks.
pub fn population_accuracy(pop: &Population, theta: &DVector<f64>, metric: &AccuracyMetric) -> f64 {
    let link = Link::expit();
    let n = pop.outcomes.len();
    (0..n)
        .map(|i| {
            let e = theta[0] + (0..pop.features.ncols()).map(|k| pop.features[(i, k)] * theta[k + 1]).sum::<f64>();
            loss(pop.outcomes[i], metric.predict(&link, e))
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_exceedance_matches_draws() {
        let noise = Noise::EXTREME;
        let mut rng = stream_rng(3, 0);
        let n = 200_000;
        let hits = (0..n).filter(|_| noise.draw(&mut rng) > -1.8).count() as f64 / n as f64;
        let p = noise.exceedance(0.0, 1.0, -1.8);
        assert!((hits - p).abs() < 0.004, "{hits} vs {p}");
    }

    #[test]
    fn scenario_names_round_trip() {
        for id in ScenarioId::ALL {
            assert_eq!(ScenarioId::parse(id.name()).unwrap(), id);
            let s = serde_json::to_string(&id).unwrap();
            assert_eq!(s, format!("\"{}\"", id.name()));
        }
    }
}
