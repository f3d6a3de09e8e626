//! Library components checked against independent reference computations.

use nalgebra::{DMatrix, DVector};

use stratssl::basis::{natural_spline_columns, principal_components, spline_knots};
use stratssl::data::{load_csv, write_csv};
use stratssl::link::normal_cdf;
use stratssl::simulation::{generate, generate_population, oracle, Sampling, ScenarioId, ScenarioSpec};

/// Natural cubic interpolating spline through (knots, values), evaluated at `x`
/// by the textbook second-derivative recursion.
fn natural_interpolant(knots: &[f64], values: &[f64], x: f64) -> f64 {
    let m = knots.len() - 1;
    let h: Vec<f64> = (0..m).map(|i| knots[i + 1] - knots[i]).collect();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    let mut b = DVector::zeros(m + 1);
    a[(0, 0)] = 1.0;
    a[(m, m)] = 1.0;
    for i in 1..m {
        a[(i, i - 1)] = h[i - 1];
        a[(i, i)] = 2.0 * (h[i - 1] + h[i]);
        a[(i, i + 1)] = h[i];
        b[i] = 6.0 * ((values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1]);
    }
    let mm = a.lu().solve(&b).unwrap();
    let i = (0..m).find(|&i| x <= knots[i + 1]).unwrap_or(m - 1);
    let (t0, t1) = (knots[i], knots[i + 1]);
    let hi = h[i];
    mm[i] * (t1 - x).powi(3) / (6.0 * hi)
        + mm[i + 1] * (x - t0).powi(3) / (6.0 * hi)
        + (values[i] / hi - mm[i] * hi / 6.0) * (t1 - x)
        + (values[i + 1] / hi - mm[i + 1] * hi / 6.0) * (x - t0)
}

#[test]
fn spline_columns_span_the_natural_interpolant() {
    let v: Vec<f64> = (0..400).map(|i| (i as f64 * 0.731).sin() * 2.0 + (i as f64 / 400.0)).collect();
    let knots = spline_knots(&v, 3).unwrap();
    assert_eq!(knots.len(), 5);
    let cols = natural_spline_columns(&v, &knots);
    assert_eq!(cols.len(), 4);
    let design = DMatrix::from_fn(v.len(), 5, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    let values = [0.3, -1.0, 2.0, 0.5, -0.7];
    let target = DVector::from_iterator(v.len(), v.iter().map(|&x| natural_interpolant(&knots, &values, x)));
    let fit = design.clone().svd(true, true).solve(&target, 1e-12).unwrap();
    let resid = (&design * fit - &target).amax();
    assert!(resid < 1e-9, "residual {resid}");
}

#[test]
fn spline_columns_are_linear_beyond_the_boundary_knot() {
    let knots = [0.0, 1.0, 2.5, 4.0];
    let xs = [5.0, 6.0, 7.0, 8.0];
    let cols = natural_spline_columns(&xs, &knots);
    for c in &cols {
        let second: Vec<f64> = c.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
        assert!(second.iter().all(|d| d.abs() < 1e-9), "{second:?}");
    }
}

#[test]
fn pca_recovers_toy_eigenstructure() {
    // sample covariance [[2, 1], [1, 2]]: correlation eigenvalues 1.5 and 0.5
    let a = 1.5;
    let b = 0.75f64.sqrt();
    let m = DMatrix::from_row_slice(4, 2, &[a, a, -a, -a, b, -b, -b, b]);
    let fit = principal_components(&m, 2).unwrap();
    assert!((fit.variances[0] - 1.5).abs() < 1e-12 && (fit.variances[1] - 0.5).abs() < 1e-12, "{:?}", fit.variances);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let expected = DMatrix::from_row_slice(2, 2, &[r, r, r, -r]);
    assert!((&fit.loadings - expected).amax() < 1e-12, "{}", fit.loadings);
    assert!(fit.sds.iter().all(|s| (s - 2f64.sqrt()).abs() < 1e-12));
}

#[test]
fn csv_round_trip_preserves_dataset() {
    let mut spec = ScenarioSpec::preset(ScenarioId::Custom);
    spec.big_n = 300;
    spec.sampling = Sampling::Stratified { n_per_stratum: vec![25] };
    let data = generate(&spec, 4).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let schema = write_csv(&data, &path).unwrap();
    let back = load_csv(&path, &schema).unwrap();
    assert_eq!(back.features(), data.features());
    assert_eq!(back.strata(), data.strata());
    assert_eq!(back.labeled_mask(), data.labeled_mask());
    assert_eq!(back.outcomes(), data.outcomes());
}

#[test]
fn main_covariates_and_strata_match_closed_forms() {
    let mut spec = ScenarioSpec::preset(ScenarioId::MainI);
    spec.big_n = 200_000;
    let pop = generate_population(&spec, 3).unwrap();
    let n = pop.strata.len() as f64;
    let x1 = pop.features.column(0);
    let x2 = pop.features.column(1);
    let (m1, m2) = (x1.mean(), x2.mean());
    let cov = x1.iter().zip(x2.iter()).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / n;
    let v1 = x1.iter().map(|a| (a - m1).powi(2)).sum::<f64>() / n;
    let v2 = x2.iter().map(|b| (b - m2).powi(2)).sum::<f64>() / n;
    let corr = cov / (v1 * v2).sqrt();
    assert!((corr - 0.4).abs() < 0.01, "corr {corr}");
    assert!((v1 - 3.0).abs() < 0.05, "var {v1}");

    let p1 = pop.strata.iter().filter(|&&s| s == 1).count() as f64 / n;
    let expect = 1.0 - normal_cdf(0.25);
    let se = (expect * (1.0 - expect) / n).sqrt();
    assert!((p1 - expect).abs() < 4.0 * se, "P(S=1) {p1} vs {expect}");
}

#[test]
fn gaussian_mixture_outcome_is_fair_coin() {
    let mut spec = ScenarioSpec::preset(ScenarioId::S8Gm);
    spec.big_n = 100_000;
    let pop = generate_population(&spec, 8).unwrap();
    let n = pop.outcomes.len() as f64;
    let mean = pop.outcomes.iter().sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 4.0 * (0.25 / n).sqrt(), "prevalence {mean}");
    let mean_prob = pop.prob.iter().sum::<f64>() / n;
    assert!((mean_prob - 0.5).abs() < 0.01, "mean posterior {mean_prob}");
}

#[test]
fn generator_is_deterministic() {
    let spec = ScenarioSpec::preset(ScenarioId::MainIII);
    let a = generate(&spec, 17).unwrap().dataset;
    let b = generate(&spec, 17).unwrap().dataset;
    let c = generate(&spec, 18).unwrap().dataset;
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.n(), 200);
}

#[test]
fn main_i_oracle_recovers_generating_coefficients() {
    let truth = oracle(&ScenarioSpec::preset(ScenarioId::MainI)).unwrap();
    let expected = [-2.0, 1.0, 1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (t, e) in truth.theta.iter().zip(expected) {
        assert!((t - e).abs() < 5e-4, "{:?}", truth.theta);
    }
}
