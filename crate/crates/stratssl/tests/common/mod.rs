//! Exact property checks shared by the acceptance harness and the unit-level
//! integration tests. Each returns a one-line detail on success or failure.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use stratssl::allocation::{allocation_objective, continuous_optimum, greedy_integer_optimum, neyman, AllocationInput};
use stratssl::cv::{ensemble, ensemble_weight, run_cv, CvConfig, CvNeeds};
use stratssl::estimators::{augment_at, fit_theta_ssl, optimal_weight, plug_in_value, AccuracyEstimate, Flavor, Variant};
use stratssl::inference::{perturb_once, PerturbationBase};
use stratssl::link::{expit, Link};
use stratssl::metric::{linear_loss, loss, omr_gradient, smoothed_omr, AccuracyMetric};
use stratssl::pipeline::build_problem;
use stratssl::rng::stream_rng;
use stratssl::simulation::{generate, ScenarioId, ScenarioSpec, Sampling};
use stratssl::solver::{solve_augmentation, solve_constrained_wls, solve_weighted_score, ConstrainedProblem, SolverConfig};

pub type Check = Result<String, String>;

fn bits_equal(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Unit perturbation weights reproduce θ̂, γ̃, ν̃ and D̂ bit for bit.
pub fn perturbation_identity() -> Check {
    let mut checked = 0;
    for (id, seed) in [(ScenarioId::Custom, 5u64), (ScenarioId::MainI, 9)] {
        let mut spec = ScenarioSpec::preset(id);
        spec.big_n = 3000;
        spec.sampling = Sampling::Stratified { n_per_stratum: vec![80] };
        let g = generate(&spec, seed).map_err(|e| e.to_string())?;
        let mut cfg = spec.default_analysis();
        cfg.cv = CvConfig { replications: 1, ..cfg.cv };
        let (problem, _, _) = build_problem(&g.dataset, &cfg).map_err(|e| e.to_string())?;
        let run = run_cv(&problem, &cfg.cv, CvNeeds { ssl: true, dr: false }).map_err(|e| e.to_string())?;
        let ssl = fit_theta_ssl(&problem, run.primary().unwrap()).map_err(|e| e.to_string())?;
        for metric in spec.metrics() {
            let imp = augment_at(&problem, &ssl.imputation.eta_gamma, &ssl.imputation.gamma.coefficients, &ssl.theta.coefficients, &metric)
                .map_err(|e| e.to_string())?;
            let base = PerturbationBase::new(&problem, &ssl, &imp, metric).map_err(|e| e.to_string())?;
            let fit = perturb_once(&base, &vec![1.0; problem.n()]).map_err(|e| e.to_string())?;
            let value = plug_in_value(&imp.augmented, &imp.yhat);
            let same = bits_equal(&fit.theta, &ssl.theta.coefficients)
                && bits_equal(&fit.gamma, &imp.gamma)
                && bits_equal(&fit.nu, &imp.nu)
                && fit.value.to_bits() == value.to_bits();
            if !same {
                return Err(format!("{} {}: refit differs (value {} vs {})", id.name(), metric.name(), fit.value, value));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} scenario/metric fits reproduced exactly"))
}

/// Weighted residual moments against [1, 𝒴] after every converged ν̃ solve.
pub fn augmentation_orthogonality(instances: usize) -> Check {
    let link = Link::expit();
    let cfg = SolverConfig::default();
    let mut worst = 0.0f64;
    let mut converged = 0;
    for t in 0..instances {
        let mut rng = stream_rng(0xA11, t as u64);
        let n = rng.random_range(15..200);
        let binary = rng.random::<bool>();
        let yhat: Vec<f64> = (0..n).map(|_| if binary { rng.random::<bool>() as u8 as f64 } else { rng.random::<f64>() }).collect();
        let offset: Vec<f64> = (0..n).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = offset.iter().map(|&o| (rng.random::<f64>() < expit(o)) as u8 as f64).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
        let normalizer = w.iter().sum::<f64>() * rng.random_range(1.0..3.0);
        let z = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { yhat[r] });
        let Ok(out) = solve_augmentation(&z, &offset, &y, &w, normalizer, &link, &cfg, None) else { continue };
        converged += 1;
        let nu = &out.outcome.coefficients;
        let mut m = [0.0f64; 2];
        for i in 0..n {
            let r = w[i] * (y[i] - link.g(offset[i] + nu[0] + nu[1] * yhat[i]));
            m[0] += r;
            m[1] += r * yhat[i];
        }
        worst = worst.max((m[0] / normalizer).abs()).max((m[1] / normalizer).abs());
    }
    if converged * 10 < instances * 9 {
        return Err(format!("only {converged}/{instances} solves converged"));
    }
    if worst <= 1e-8 {
        Ok(format!("max residual {worst:.2e} over {converged} converged solves"))
    } else {
        Err(format!("max residual {worst:.2e} exceeds 1e-8"))
    }
}

/// d(y, 𝒴) = y(1 − 2𝒴) + 𝒴² for y ∈ {0, 1} on a dyadic grid.
pub fn loss_identity() -> Check {
    let mut count = 0;
    for k in 0..=1024 {
        let yhat = k as f64 / 1024.0;
        for y in [0.0, 1.0] {
            let direct = (y - yhat) * (y - yhat);
            if loss(y, yhat) != direct || linear_loss(y, yhat) != direct {
                return Err(format!("mismatch at y={y}, yhat={yhat}"));
            }
            count += 1;
        }
    }
    Ok(format!("{count} grid points exact"))
}

/// Independent IRLS for the ridge-penalized weighted logistic score.
pub fn irls_oracle(phi: &DMatrix<f64>, y: &[f64], w: &[f64], normalizer: f64, ridge: f64) -> DVector<f64> {
    let q = phi.ncols();
    let mut beta = DVector::zeros(q);
    for _ in 0..200 {
        let eta = phi * &beta;
        let mut lhs = DMatrix::identity(q, q) * ridge;
        let mut rhs = DVector::zeros(q);
        for i in 0..phi.nrows() {
            let mu = 1.0 / (1.0 + (-eta[i]).exp());
            let v = (mu * (1.0 - mu)).max(1e-12);
            let work = eta[i] + (y[i] - mu) / v;
            let row = phi.row(i).transpose();
            lhs += &row * row.transpose() * (w[i] * v / normalizer);
            rhs += &row * (w[i] * v * work / normalizer);
        }
        let next = lhs.lu().solve(&rhs).expect("nonsingular IRLS system");
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-13 {
            break;
        }
    }
    beta
}

/// Weighted-score solves against IRLS, and identity-link constrained WLS
/// against the closed-form KKT system.
pub fn solver_oracles(instances: usize) -> Check {
    let link = Link::expit();
    let mut worst_score = 0.0f64;
    for t in 0..instances {
        let mut rng = stream_rng(0x1215, t as u64);
        let n = rng.random_range(40..160);
        let q = rng.random_range(2..6);
        let phi = DMatrix::from_fn(n, q, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
        let beta: Vec<f64> = (0..q).map(|_| rng.random_range(-0.8..0.8)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let e: f64 = (0..q).map(|c| phi[(i, c)] * beta[c]).sum();
                (rng.random::<f64>() < expit(e)) as u8 as f64
            })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
        let normalizer = w.iter().sum::<f64>();
        let ridge = if t % 2 == 0 { 0.0 } else { rng.random_range(1e-4..1e-1) };
        let cfg = SolverConfig { ridge, ..SolverConfig::default() };
        let ours = match solve_weighted_score(&phi, &y, &w, normalizer, &link, &cfg, None) {
            Ok(o) => o.coefficients,
            Err(e) => return Err(format!("instance {t}: {e}")),
        };
        let oracle = irls_oracle(&phi, &y, &w, normalizer, ridge);
        worst_score = worst_score.max((&ours - &oracle).amax());
    }
    if worst_score > 1e-6 {
        return Err(format!("weighted score differs from IRLS by {worst_score:.2e}"));
    }

    let identity = Link::identity();
    let mut worst_kkt = 0.0f64;
    for t in 0..instances {
        let mut rng = stream_rng(0xC0DE, t as u64);
        let n = rng.random_range(20..80);
        let q = rng.random_range(2..7);
        let r = rng.random_range(1..3);
        let phi = DMatrix::from_fn(n, q, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
        let moments = DMatrix::from_fn(n, r, |_, c| if c == 0 { 1.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n).map(|_| rng.random::<bool>() as u8 as f64).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
        let big_n = w.iter().sum::<f64>();
        let ridge = rng.random_range(0.0..0.05);
        let problem = ConstrainedProblem { phi: &phi, y: &y, loss_weights: &a, moments: &moments, weights: &w, normalizer: big_n };
        let cfg = SolverConfig { ridge, score_tolerance: 1e-12, ..SolverConfig::default() };
        let ours = solve_constrained_wls(&problem, &identity, &cfg, &DVector::zeros(q)).map_err(|e| format!("instance {t}: {e}"))?;

        // [H Cᵀ; C 0] [γ; μ] = [Φᵀ A y / n; Mᵀ W y / N]
        let nf = n as f64;
        let mut kkt = DMatrix::zeros(q + r, q + r);
        let mut rhs = DVector::zeros(q + r);
        for i in 0..n {
            for j in 0..q {
                for l in 0..q {
                    kkt[(j, l)] += a[i] * phi[(i, j)] * phi[(i, l)] / nf;
                }
                rhs[j] += a[i] * y[i] * phi[(i, j)] / nf;
            }
            for k in 0..r {
                for j in 0..q {
                    kkt[(q + k, j)] += w[i] * moments[(i, k)] * phi[(i, j)] / big_n;
                    kkt[(j, q + k)] += w[i] * moments[(i, k)] * phi[(i, j)] / big_n;
                }
                rhs[q + k] += w[i] * moments[(i, k)] * y[i] / big_n;
            }
        }
        for j in 0..q {
            kkt[(j, j)] += 2.0 * ridge;
        }
        let sol = kkt.lu().solve(&rhs).ok_or("singular KKT system")?;
        let closed = sol.rows(0, q).into_owned();
        worst_kkt = worst_kkt.max((&ours.coefficients - &closed).amax());
    }
    if worst_kkt > 1e-8 {
        return Err(format!("constrained WLS differs from KKT solve by {worst_kkt:.2e}"));
    }
    Ok(format!("IRLS max diff {worst_score:.1e}, KKT max diff {worst_kkt:.1e} over {instances}+{instances} instances"))
}

/// W₁ = b/(a+b) for diagonal Σ̂ and ω = K/(2K−1), both exact.
pub fn weight_algebra() -> Check {
    let mut rng = stream_rng(0x12, 0);
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(1e-6..10.0);
        let b: f64 = rng.random_range(1e-6..10.0);
        let w = optimal_weight(a, 0.0, b).ok_or("degenerate weight")?;
        if w != b / (a + b) {
            return Err(format!("W1({a}, {b}) = {w}, expected {}", b / (a + b)));
        }
    }
    let fractions = [2.0 / 3.0, 3.0 / 5.0, 4.0 / 7.0, 5.0 / 9.0, 6.0 / 11.0, 7.0 / 13.0, 8.0 / 15.0, 9.0 / 17.0, 10.0 / 19.0];
    for (k, &expect) in (2..=10).zip(&fractions) {
        let omega = ensemble_weight(k);
        if omega != expect {
            return Err(format!("omega({k}) = {omega}"));
        }
        let metric = AccuracyMetric::brier();
        let app = AccuracyEstimate::apparent(metric, Variant::Ssl, 0.21);
        let cv = AccuracyEstimate { flavor: Flavor::Cv, value: 0.24, ..app.clone() };
        let ens = ensemble(&app, &cv, k).map_err(|e| e.to_string())?;
        if ens.value != expect * 0.21 + (1.0 - expect) * 0.24 {
            return Err(format!("ensemble value for K={k} is {}", ens.value));
        }
    }
    Ok("10000 diagonal weights and K=2..10 exact".into())
}

/// Random integer allocations never beat the continuous optimum, and the
/// Neyman allocation is within rounding slack of every alternative.
pub fn neyman_random_search(alternatives: usize) -> Check {
    let mut worst_slack = 0.0f64;
    for t in 0..40 {
        let mut rng = stream_rng(0x4E7, t);
        let s = rng.random_range(1..=4);
        let budget = rng.random_range(4 * s..600);
        let raw: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let rho: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let sigma: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
        let alloc = neyman(&AllocationInput::new(rho.clone(), sigma.clone(), budget)).map_err(|e| e.to_string())?;
        let ours = allocation_objective(&rho, &sigma, &alloc.n_s);
        let lower = continuous_optimum(&rho, &sigma, budget);
        let best_int = allocation_objective(&rho, &sigma, &greedy_integer_optimum(&rho, &sigma, budget));
        let slack = ours - best_int;
        worst_slack = worst_slack.max(slack / lower);
        if slack > 0.01 * lower {
            return Err(format!("rounding slack {slack:.3e} too large for S={s}, n={budget}"));
        }
        for k in 0..alternatives {
            let cand: Vec<usize> = if k % 2 == 0 {
                // random composition with every stratum nonempty
                let mut cuts: Vec<usize> = (0..s - 1).map(|_| rng.random_range(1..budget)).collect();
                cuts.sort_unstable();
                let mut prev = 0;
                let mut out = Vec::with_capacity(s);
                for c in cuts.into_iter().chain(std::iter::once(budget)) {
                    out.push(c - prev);
                    prev = c;
                }
                out
            } else {
                // local move away from the Neyman allocation
                let mut out = alloc.n_s.clone();
                if s > 1 {
                    let from = rng.random_range(0..s);
                    let to = (from + rng.random_range(1..s)) % s;
                    let m = rng.random_range(1..=3).min(out[from]);
                    out[from] -= m;
                    out[to] += m;
                }
                out
            };
            let obj = allocation_objective(&rho, &sigma, &cand);
            if obj < lower * (1.0 - 1e-12) {
                return Err(format!("allocation {cand:?} beats the continuous optimum"));
            }
            if obj < ours - slack - 1e-15 {
                return Err(format!("allocation {cand:?} beats Neyman beyond rounding slack"));
            }
        }
    }
    Ok(format!("40 designs x {alternatives} alternatives, worst relative slack {worst_slack:.2e}"))
}

/// Observed order of the central-difference error for the smoothed-OMR
/// gradient on a fixed instance.
pub fn kernel_derivative_order() -> Check {
    let mut rng = stream_rng(0xFD, 0);
    let n = 300;
    let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
    let y: Vec<f64> = (0..n).map(|i| (rng.random::<f64>() < expit(0.3 + x[(i, 1)] - 0.5 * x[(i, 2)])) as u8 as f64).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..4.0)).collect();
    let big_n = w.iter().sum::<f64>();
    let link = Link::expit();
    let theta = DVector::from_vec(vec![0.2, 0.9, -0.4]);
    let (c, h) = (0.5, 0.25);
    let analytic = omr_gradient(&x, &y, &w, big_n, &link, &theta, c, h);
    let fd = |step: f64| -> DVector<f64> {
        DVector::from_fn(3, |j, _| {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += step;
            dn[j] -= step;
            (smoothed_omr(&x, &y, &w, big_n, &link, &up, c, h) - smoothed_omr(&x, &y, &w, big_n, &link, &dn, c, h)) / (2.0 * step)
        })
    };
    let steps = [0.08, 0.04, 0.02, 0.01];
    let errors: Vec<f64> = steps.iter().map(|&s| (fd(s) - &analytic).amax()).collect();
    let orders: Vec<f64> = errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    let ok = orders.iter().all(|o| (1.8..=2.2).contains(o));
    let fmt = |v: &[f64], f: fn(f64) -> String| v.iter().map(|&e| f(e)).collect::<Vec<_>>().join(" ");
    let detail = format!("errors [{}], observed orders [{}]", fmt(&errors, |e| format!("{e:.2e}")), fmt(&orders, |o| format!("{o:.2}")));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
