//! Neyman allocation of a labeling budget across strata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stratum shares, influence standard deviations and the total budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationInput {
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub budget: usize,
    /// Mixing weight toward the equal split n/S, in [0, 1].
    #[serde(default)]
    pub shrinkage: f64,
}

impl AllocationInput {
    pub fn new(rho: Vec<f64>, sigma: Vec<f64>, budget: usize) -> Self {
        AllocationInput { rho, sigma, budget, shrinkage: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.is_empty() || self.rho.len() != self.sigma.len() {
            return Err(Error::validation("rho", "rho and sigma must be nonempty and of equal length"));
        }
        if self.rho.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::validation("rho", "stratum proportions must be positive"));
        }
        if (self.rho.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::validation("rho", "stratum proportions must sum to 1"));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::validation("sigma", "standard deviations must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::validation("shrinkage", "must lie in [0, 1]"));
        }
        if self.sigma.iter().all(|&s| s == 0.0) {
            return Err(Error::AllZeroVariance);
        }
        Ok(())
    }
}

/// Allocation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    /// Continuous allocation before rounding.
    pub continuous: Vec<f64>,
    pub n_s: Vec<usize>,
    pub shares: Vec<f64>,
    /// Σ ρ_s² σ_s² / n_s at the rounded allocation.
    pub objective: f64,
    /// (Σ ρ_s σ_s)² / n, the continuous optimum.
    pub optimum: f64,
}

/// n_s = n ρ_s σ_s / Σ ρ_j σ_j, optionally shrunk toward n/S, then rounded by
/// largest remainder. Strata with σ_s > 0 receive at least one unit.
pub fn neyman(input: &AllocationInput) -> Result<Allocation> {
    input.validate()?;
    let s = input.rho.len();
    let n = input.budget as f64;
    let positive = input.sigma.iter().filter(|&&v| v > 0.0).count();
    if input.budget < positive {
        return Err(Error::validation("budget", format!("{} is below the {positive} strata with positive variance", input.budget)));
    }
    let rs: Vec<f64> = input.rho.iter().zip(&input.sigma).map(|(r, v)| r * v).collect();
    let total: f64 = rs.iter().sum();
    let continuous: Vec<f64> =
        rs.iter().map(|v| (1.0 - input.shrinkage) * n * v / total + input.shrinkage * n / s as f64).collect();
    let n_s = round_largest_remainder(&continuous, input.budget, &input.sigma);
    let objective = allocation_objective(&input.rho, &input.sigma, &n_s);
    let shares = n_s.iter().map(|&v| v as f64 / n).collect();
    Ok(Allocation { continuous, n_s, shares, objective, optimum: continuous_optimum(&input.rho, &input.sigma, input.budget) })
}

/// Floors, then hands the leftover units to the largest remainders. A stratum
/// with σ > 0 and a zero floor is raised to one, taking from the largest
/// allocation.
fn round_largest_remainder(cont: &[f64], budget: usize, sigma: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = cont.iter().map(|v| v.floor() as usize).collect();
    let mut left = budget - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..cont.len()).collect();
    order.sort_by(|&a, &b| (cont[b] - cont[b].floor()).partial_cmp(&(cont[a] - cont[a].floor())).unwrap().then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    for i in 0..out.len() {
        if sigma[i] > 0.0 && out[i] == 0 {
            let donor = (0..out.len()).max_by_key(|&j| (out[j], std::cmp::Reverse(j))).unwrap();
            out[donor] -= 1;
            out[i] = 1;
        }
    }
    out
}

/// Σ ρ_s² σ_s² / n_s; strata with σ_s = 0 contribute nothing.
pub fn allocation_objective(rho: &[f64], sigma: &[f64], n_s: &[usize]) -> f64 {
    rho.iter()
        .zip(sigma)
        .zip(n_s)
        .map(|((r, s), &m)| {
            let num = r * r * s * s;
            if num == 0.0 {
                0.0
            } else if m == 0 {
                f64::INFINITY
            } else {
                num / m as f64
            }
        })
        .sum()
}

/// (Σ ρ_s σ_s)² / n.
pub fn continuous_optimum(rho: &[f64], sigma: &[f64], budget: usize) -> f64 {
    rho.iter().zip(sigma).map(|(r, s)| r * s).sum::<f64>().powi(2) / budget as f64
}

/// Exact integer minimizer of [`allocation_objective`] by marginal-gain
/// greedy assignment, which is optimal for separable convex objectives.
pub fn greedy_integer_optimum(rho: &[f64], sigma: &[f64], budget: usize) -> Vec<usize> {
    let s = rho.len();
    let c: Vec<f64> = rho.iter().zip(sigma).map(|(r, v)| (r * v).powi(2)).collect();
    let mut out: Vec<usize> = c.iter().map(|&v| (v > 0.0) as usize).collect();
    let mut used: usize = out.iter().sum();
    while used < budget {
        let gain = |i: usize| c[i] / out[i].max(1) as f64 - c[i] / (out[i] + 1) as f64;
        let best = (0..s).max_by(|&a, &b| gain(a).partial_cmp(&gain(b)).unwrap().then(b.cmp(&a))).unwrap();
        out[best] += 1;
        used += 1;
    }
    out
}

/// Within-stratum root mean square of `influence`; `strata` holds 1-based
/// labels aligned with `influence`.
pub fn estimate_stratum_sds(influence: &[f64], strata: &[usize], num_strata: usize) -> Result<Vec<f64>> {
    if influence.len() != strata.len() {
        return Err(Error::validation("influence", "length differs from strata"));
    }
    let mut sum = vec![0.0; num_strata];
    let mut count = vec![0usize; num_strata];
    for (&f, &s) in influence.iter().zip(strata) {
        if s == 0 || s > num_strata {
            return Err(Error::validation("strata", format!("label {s} outside 1..={num_strata}")));
        }
        sum[s - 1] += f * f;
        count[s - 1] += 1;
    }
    (0..num_strata)
        .map(|s| if count[s] == 0 { Err(Error::EmptyStratum { stratum: s + 1 }) } else { Ok((sum[s] / count[s] as f64).sqrt()) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_split_evenly() {
        let a = neyman(&AllocationInput::new(vec![0.5, 0.5], vec![1.0, 1.0], 100)).unwrap();
        assert_eq!(a.n_s, vec![50, 50]);
    }

    #[test]
    fn zero_variance_stratum_gets_nothing() {
        let a = neyman(&AllocationInput::new(vec![0.5, 0.5], vec![1.0, 0.0], 100)).unwrap();
        assert_eq!(a.n_s, vec![100, 0]);
        assert!(matches!(neyman(&AllocationInput::new(vec![0.5, 0.5], vec![0.0, 0.0], 10)), Err(Error::AllZeroVariance)));
    }

    #[test]
    fn floor_rule_and_total() {
        let a = neyman(&AllocationInput::new(vec![0.98, 0.01, 0.01], vec![1.0, 0.001, 0.001], 20)).unwrap();
        assert_eq!(a.n_s.iter().sum::<usize>(), 20);
        assert!(a.n_s.iter().all(|&v| v >= 1));
    }

    #[test]
    fn constant_influence_gives_its_magnitude() {
        let sd = estimate_stratum_sds(&[-2.0, -2.0, 1.0, -1.0], &[1, 1, 2, 2], 2).unwrap();
        assert_eq!(sd, vec![2.0, 1.0]);
        assert!(matches!(estimate_stratum_sds(&[1.0], &[1], 2), Err(Error::EmptyStratum { stratum: 2 })));
    }
}
