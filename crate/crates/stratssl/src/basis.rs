//! Imputation bases: raw covariates, natural cubic splines, interactions,
//! stratum indicators and principal components.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::SemiSupervisedDataset;
use crate::error::{Error, Result, Warning};
use crate::linalg::weighted_crossprod;

/// Which covariate block a component reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Features,
    Auxiliary,
}

/// Pre-decomposition transform for principal components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcTransform {
    #[default]
    Raw,
    /// All squares and pairwise products.
    Quadratic,
}

/// One generator of basis columns. Indices are 0-based; `None` means all
/// columns of the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisComponent {
    Intercept,
    Raw {
        #[serde(default)]
        source: Source,
        #[serde(default)]
        indices: Option<Vec<usize>>,
    },
    /// Natural cubic spline with `knots` interior knots; contributes
    /// `knots + 1` columns per variable.
    NaturalSpline {
        #[serde(default)]
        source: Source,
        #[serde(default)]
        indices: Option<Vec<usize>>,
        knots: usize,
    },
    /// Products of feature pairs.
    Interactions { pairs: Vec<(usize, usize)> },
    /// I(S = s) for s = 1..S−1.
    StratumIndicators,
    /// Every column of `inner` multiplied by every stratum indicator.
    StratumProducts { inner: Vec<BasisComponent> },
    PrincipalComponents {
        #[serde(default)]
        source: Source,
        #[serde(default)]
        transform: PcTransform,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BasisSpec {
    pub components: Vec<BasisComponent>,
}

impl BasisSpec {
    pub fn new(components: Vec<BasisComponent>) -> Self {
        BasisSpec { components }
    }

    /// `[1, x]`.
    pub fn linear() -> Self {
        BasisSpec::new(vec![BasisComponent::Intercept, BasisComponent::Raw { source: Source::Features, indices: None }])
    }

    /// `[1, x, ns(x), 𝕊]` with `knots` interior knots per feature.
    pub fn spline_with_strata(knots: usize) -> Self {
        BasisSpec::new(vec![
            BasisComponent::Intercept,
            BasisComponent::Raw { source: Source::Features, indices: None },
            BasisComponent::NaturalSpline { source: Source::Features, indices: None, knots },
            BasisComponent::StratumIndicators,
        ])
    }

    /// Interactions x₁:x₋₁ and x₂:x₋₍₁,₂₎ for p features.
    pub fn leading_interactions(p: usize) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = (1..p).map(|j| (0, j)).collect();
        pairs.extend((2..p).map(|j| (1, j)));
        pairs
    }

    /// `[1, x, v₂, 𝕊]` with the leading interactions.
    pub fn interactions_with_strata(p: usize) -> Self {
        BasisSpec::new(vec![
            BasisComponent::Intercept,
            BasisComponent::Raw { source: Source::Features, indices: None },
            BasisComponent::Interactions { pairs: Self::leading_interactions(p) },
            BasisComponent::StratumIndicators,
        ])
    }

    fn validate(&self) -> Result<()> {
        fn check(c: &BasisComponent) -> Result<()> {
            match c {
                BasisComponent::NaturalSpline { knots, .. } if *knots < 2 => {
                    Err(Error::validation("basis.knots", "natural splines need at least 2 knots"))
                }
                BasisComponent::StratumProducts { inner } => inner.iter().try_for_each(check),
                BasisComponent::PrincipalComponents { count: 0, .. } => {
                    Err(Error::validation("basis.count", "principal component count must be positive"))
                }
                _ => Ok(()),
            }
        }
        self.components.iter().try_for_each(check)
    }

    /// Spec with an intercept first and every raw feature present.
    pub fn completed(&self, p: usize) -> BasisSpec {
        let mut comps = self.components.clone();
        if !comps.iter().any(|c| matches!(c, BasisComponent::Intercept)) {
            comps.insert(0, BasisComponent::Intercept);
        }
        let mut covered = vec![false; p];
        for c in &comps {
            if let BasisComponent::Raw { source: Source::Features, indices } = c {
                match indices {
                    None => covered.iter_mut().for_each(|v| *v = true),
                    Some(idx) => idx.iter().filter(|&&j| j < p).for_each(|&j| covered[j] = true),
                }
            }
        }
        let missing: Vec<usize> = (0..p).filter(|&j| !covered[j]).collect();
        if !missing.is_empty() {
            let pos = comps.iter().position(|c| matches!(c, BasisComponent::Intercept)).unwrap() + 1;
            let indices = if missing.len() == p { None } else { Some(missing) };
            comps.insert(pos, BasisComponent::Raw { source: Source::Features, indices });
        }
        BasisSpec { components: comps }
    }
}

/// Knots used for one spline variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnotSet {
    pub source: Source,
    pub column: usize,
    /// Boundary and interior knots, increasing.
    pub knots: Vec<f64>,
}

/// Evaluated basis over all N units.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
    pub spec: BasisSpec,
    pub knots: Vec<KnotSet>,
    pub rank: usize,
    pub warnings: Vec<Warning>,
}

impl BasisMatrix {
    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

/// Evaluates `spec` on every unit. Intercept and raw features are inserted if
/// the spec omits them.
pub fn expand(spec: &BasisSpec, dataset: &SemiSupervisedDataset) -> Result<BasisMatrix> {
    spec.validate()?;
    let spec = spec.completed(dataset.p());
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut knots = Vec::new();
    for c in &spec.components {
        eval_component(c, dataset, &mut cols, &mut labels, &mut knots)?;
    }
    let big_n = dataset.big_n();
    let values = DMatrix::from_fn(big_n, cols.len(), |i, j| cols[j][i]);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("basis", "non-finite basis value"));
    }
    let rank = crossprod_rank(&values);
    let mut warnings = Vec::new();
    if rank < values.ncols() {
        warnings.push(Warning::RankDeficient { columns: values.ncols(), rank });
    }
    Ok(BasisMatrix { values, labels, spec, knots, rank, warnings })
}

fn crossprod_rank(m: &DMatrix<f64>) -> usize {
    let q = m.ncols();
    if q == 0 {
        return 0;
    }
    // scale columns so the rank reflects collinearity, not units
    let mut scaled = m.clone();
    for mut c in scaled.column_iter_mut() {
        let nrm = c.norm();
        if nrm > 0.0 {
            c /= nrm;
        }
    }
    let g = weighted_crossprod(&scaled, &vec![1.0; m.nrows()]);
    let ev = SymmetricEigen::new(g).eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    ev.iter().filter(|&&e| e > max * 1e-12).count()
}

fn source_matrix(dataset: &SemiSupervisedDataset, source: Source) -> Result<&DMatrix<f64>> {
    match source {
        Source::Features => Ok(dataset.features()),
        Source::Auxiliary => {
            dataset.auxiliary().ok_or_else(|| Error::Schema("basis references auxiliary covariates but none are loaded".into()))
        }
    }
}

fn resolve_indices(indices: &Option<Vec<usize>>, ncols: usize, field: &str) -> Result<Vec<usize>> {
    match indices {
        None => Ok((0..ncols).collect()),
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&j| j >= ncols) {
                return Err(Error::validation(field, format!("index {bad} out of range for {ncols} columns")));
            }
            Ok(idx.clone())
        }
    }
}

fn prefix(source: Source) -> &'static str {
    match source {
        Source::Features => "x",
        Source::Auxiliary => "z",
    }
}

fn eval_component(
    c: &BasisComponent,
    dataset: &SemiSupervisedDataset,
    cols: &mut Vec<Vec<f64>>,
    labels: &mut Vec<String>,
    knots_out: &mut Vec<KnotSet>,
) -> Result<()> {
    let big_n = dataset.big_n();
    match c {
        BasisComponent::Intercept => {
            cols.push(vec![1.0; big_n]);
            labels.push("1".into());
        }
        BasisComponent::Raw { source, indices } => {
            let m = source_matrix(dataset, *source)?;
            for j in resolve_indices(indices, m.ncols(), "basis.raw")? {
                cols.push(m.column(j).iter().cloned().collect());
                labels.push(format!("{}{}", prefix(*source), j + 1));
            }
        }
        BasisComponent::NaturalSpline { source, indices, knots } => {
            let m = source_matrix(dataset, *source)?;
            for j in resolve_indices(indices, m.ncols(), "basis.natural_spline")? {
                let v: Vec<f64> = m.column(j).iter().cloned().collect();
                let ks = spline_knots(&v, *knots).ok_or(Error::DegenerateFeature { column: j })?;
                let block = natural_spline_columns(&v, &ks);
                for (k, col) in block.into_iter().enumerate() {
                    cols.push(col);
                    labels.push(format!("ns({}{})[{}]", prefix(*source), j + 1, k + 1));
                }
                knots_out.push(KnotSet { source: *source, column: j, knots: ks });
            }
        }
        BasisComponent::Interactions { pairs } => {
            let m = dataset.features();
            for &(a, b) in pairs {
                if a >= m.ncols() || b >= m.ncols() {
                    return Err(Error::validation("basis.interactions", format!("pair ({a},{b}) out of range")));
                }
                cols.push(m.column(a).iter().zip(m.column(b).iter()).map(|(u, v)| u * v).collect());
                labels.push(format!("x{}:x{}", a + 1, b + 1));
            }
        }
        BasisComponent::StratumIndicators => {
            for s in 1..dataset.num_strata() {
                cols.push(dataset.strata().iter().map(|&t| (t == s) as u8 as f64).collect());
                labels.push(format!("S{s}"));
            }
        }
        BasisComponent::StratumProducts { inner } => {
            let mut icols = Vec::new();
            let mut ilabels = Vec::new();
            for ic in inner {
                eval_component(ic, dataset, &mut icols, &mut ilabels, knots_out)?;
            }
            for s in 1..dataset.num_strata() {
                for (col, lab) in icols.iter().zip(&ilabels) {
                    cols.push(col.iter().zip(dataset.strata()).map(|(v, &t)| if t == s { *v } else { 0.0 }).collect());
                    labels.push(format!("S{s}:{lab}"));
                }
            }
        }
        BasisComponent::PrincipalComponents { source, transform, count } => {
            let m = source_matrix(dataset, *source)?;
            let input = match transform {
                PcTransform::Raw => m.clone(),
                PcTransform::Quadratic => quadratic_expansion(m),
            };
            let fit = principal_components(&input, *count)?;
            let tag = match transform {
                PcTransform::Raw => "pc",
                PcTransform::Quadratic => "pcq",
            };
            for k in 0..*count {
                cols.push(fit.scores.column(k).iter().cloned().collect());
                labels.push(format!("{tag}{}({})", k + 1, prefix(*source)));
            }
        }
    }
    Ok(())
}

/// Boundary knots at the extremes and `interior` knots at the quantiles
/// k/(interior+1) of `v`. `None` when `v` is constant.
pub fn spline_knots(v: &[f64], interior: usize) -> Option<Vec<f64>> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (sorted[0], *sorted.last().unwrap());
    if !(hi > lo) {
        return None;
    }
    let mut knots = vec![lo];
    for k in 1..=interior {
        knots.push(quantile_sorted(&sorted, k as f64 / (interior + 1) as f64));
    }
    knots.push(hi);
    Some(knots)
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Truncated-power natural cubic spline columns for all knots `ξ_1..ξ_K`:
/// `x` followed by `d_k − d_{K−1}`, k = 1..K−2, with
/// `d_k(x) = ((x−ξ_k)₊³ − (x−ξ_K)₊³)/(ξ_K − ξ_k)`. Linear beyond the boundary knots.
pub fn natural_spline_columns(v: &[f64], knots: &[f64]) -> Vec<Vec<f64>> {
    let kk = knots.len();
    let last = knots[kk - 1];
    let cube = |a: f64| if a > 0.0 { a * a * a } else { 0.0 };
    let d = |x: f64, k: usize| (cube(x - knots[k]) - cube(x - last)) / (last - knots[k]);
    let mut out = vec![v.to_vec()];
    for k in 0..kk - 2 {
        out.push(v.iter().map(|&x| d(x, k) - d(x, kk - 2)).collect());
    }
    out
}

/// All squares followed by all pairwise products of the columns.
pub fn quadratic_expansion(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, p) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| m.column(j).iter().map(|v| v * v).collect()).collect();
    for a in 0..p {
        for b in a + 1..p {
            cols.push(m.column(a).iter().zip(m.column(b).iter()).map(|(u, v)| u * v).collect());
        }
    }
    DMatrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Principal components of standardized columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// p×count loadings, columns ordered by decreasing variance.
    pub loadings: DMatrix<f64>,
    pub variances: Vec<f64>,
    /// rows×count component scores.
    pub scores: DMatrix<f64>,
}

/// Centers and unit-scales each column over all rows, then takes the leading
/// `count` eigenvectors of the correlation matrix. Each loading vector is
/// signed so its largest-magnitude entry is positive. Constant columns are
/// left centered but unscaled.
pub fn principal_components(m: &DMatrix<f64>, count: usize) -> Result<PcaFit> {
    let (rows, p) = m.shape();
    if rows < 2 {
        return Err(Error::validation("principal_components", "need at least 2 rows"));
    }
    let means: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let sds: Vec<f64> = m
        .column_iter()
        .zip(&means)
        .map(|(c, mu)| (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (rows - 1) as f64).sqrt())
        .collect();
    let z = DMatrix::from_fn(rows, p, |i, j| {
        let c = m[(i, j)] - means[j];
        if sds[j] > 0.0 {
            c / sds[j]
        } else {
            c
        }
    });
    let cov = weighted_crossprod(&z, &vec![1.0; rows]) / (rows - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let max = eig.eigenvalues[order[0]].max(0.0);
    let rank = order.iter().filter(|&&k| eig.eigenvalues[k] > max * 1e-10).count();
    if count > rank {
        return Err(Error::Rank { requested: count, rank });
    }
    let mut loadings = DMatrix::zeros(p, count);
    let mut variances = Vec::with_capacity(count);
    for (c, &k) in order.iter().take(count).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v = -v;
        }
        loadings.set_column(c, &v);
        variances.push(eig.eigenvalues[k]);
    }
    let scores = &z * &loadings;
    Ok(PcaFit { means, sds, loadings, variances, scores })
}

/// Intercept plus the first `count_raw` PCs of the source block and the first
/// `count_transformed` PCs of its quadratic expansion.
pub fn pc_basis(
    dataset: &SemiSupervisedDataset,
    source: Source,
    count_raw: usize,
    count_transformed: usize,
) -> Result<BasisMatrix> {
    let mut comps = vec![BasisComponent::Intercept];
    if count_raw > 0 {
        comps.push(BasisComponent::PrincipalComponents { source, transform: PcTransform::Raw, count: count_raw });
    }
    if count_transformed > 0 {
        comps.push(BasisComponent::PrincipalComponents { source, transform: PcTransform::Quadratic, count: count_transformed });
    }
    let spec = BasisSpec::new(comps);
    // no raw-feature completion: the PCs themselves are the target covariates
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    let mut knots = Vec::new();
    for c in &spec.components {
        eval_component(c, dataset, &mut cols, &mut labels, &mut knots)?;
    }
    let values = DMatrix::from_fn(dataset.big_n(), cols.len(), |i, j| cols[j][i]);
    let rank = crossprod_rank(&values);
    Ok(BasisMatrix { values, labels, spec, knots, rank, warnings: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(p: usize, rows: usize, strata: Vec<usize>) -> SemiSupervisedDataset {
        let x = DMatrix::from_fn(rows, p, |i, j| ((i * 7 + j * 3) % 11) as f64 / 3.0 + (i as f64).sin());
        let mut mask = vec![false; rows];
        let mut ys = Vec::new();
        for s in 1..=strata.iter().max().cloned().unwrap() {
            let i = strata.iter().position(|&t| t == s).unwrap();
            mask[i] = true;
        }
        for i in 0..rows {
            if mask[i] {
                ys.push((i % 2) as f64);
            }
        }
        SemiSupervisedDataset::new(x, strata, mask, ys).unwrap()
    }

    #[test]
    fn identity_basis() {
        let d = data(3, 20, vec![1; 20]);
        let b = expand(&BasisSpec::linear(), &d).unwrap();
        assert_eq!(b.ncols(), 4);
        assert_eq!(b.values.columns(1, 3), d.features().columns(0, 3));
    }

    #[test]
    fn intercept_and_raw_are_inserted() {
        let d = data(3, 20, vec![1; 20]);
        let spec = BasisSpec::new(vec![BasisComponent::Interactions { pairs: vec![(0, 1), (0, 2)] }]);
        let b = expand(&spec, &d).unwrap();
        assert_eq!(b.labels, vec!["1", "x1", "x2", "x3", "x1:x2", "x1:x3"]);
    }

    #[test]
    fn spline_column_count() {
        let strata: Vec<usize> = (0..200).map(|i| 1 + (i % 2)).collect();
        let d = data(10, 200, strata);
        let b = expand(&BasisSpec::spline_with_strata(3), &d).unwrap();
        assert_eq!(b.ncols(), 1 + 10 + 10 * 4 + 1);
        assert!(b.rank < b.ncols());
        assert!(matches!(b.warnings[0], Warning::RankDeficient { .. }));
    }

    #[test]
    fn constant_spline_target_is_rejected() {
        let x = DMatrix::from_element(5, 1, 2.0);
        let d = SemiSupervisedDataset::new(x, vec![1; 5], vec![true; 5], vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let spec = BasisSpec::spline_with_strata(3);
        assert!(matches!(expand(&spec, &d), Err(Error::DegenerateFeature { column: 0 })));
    }

    #[test]
    fn quadratic_expansion_count() {
        let m = DMatrix::from_fn(30, 10, |i, j| (i * j) as f64);
        assert_eq!(quadratic_expansion(&m).ncols(), 55);
    }

    #[test]
    fn leading_interaction_count() {
        assert_eq!(BasisSpec::leading_interactions(10).len(), 17);
        assert_eq!(BasisSpec::leading_interactions(3), vec![(0, 1), (0, 2), (1, 2)]);
    }
}
