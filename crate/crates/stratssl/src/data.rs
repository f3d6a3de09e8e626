//! Datasets with a partially labeled binary outcome, stratified sampling
//! designs and inverse-probability weights.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Covariates for all N units, outcomes for the n labeled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiSupervisedDataset {
    features: DMatrix<f64>,
    auxiliary: Option<DMatrix<f64>>,
    strata: Vec<usize>,
    labeled: Vec<bool>,
    outcomes: Vec<f64>,
    labeled_index: Vec<usize>,
    num_strata: usize,
    feature_names: Vec<String>,
}

impl SemiSupervisedDataset {
    /// `features` is N×p without intercept; `strata` are labels in 1..S;
    /// `outcomes` holds one 0/1 value per labeled row, in row order.
    pub fn new(
        features: DMatrix<f64>,
        strata: Vec<usize>,
        labeled_mask: Vec<bool>,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        let big_n = features.nrows();
        if big_n == 0 {
            return Err(Error::validation("features", "no rows"));
        }
        if strata.len() != big_n {
            return Err(Error::validation("strata", format!("length {} != {big_n} rows", strata.len())));
        }
        if labeled_mask.len() != big_n {
            return Err(Error::validation(
                "labeled_mask",
                format!("length {} != {big_n} rows", labeled_mask.len()),
            ));
        }
        let labeled_index: Vec<usize> = (0..big_n).filter(|&i| labeled_mask[i]).collect();
        if labeled_index.len() != outcomes.len() {
            return Err(Error::validation(
                "outcomes",
                format!("{} outcomes for {} labeled rows", outcomes.len(), labeled_index.len()),
            ));
        }
        if let Some(bad) = outcomes.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Schema(format!("outcome {bad} is not binary")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("features", "non-finite value"));
        }
        let num_strata = check_contiguous(&strata)?;
        let p = features.ncols();
        Ok(SemiSupervisedDataset {
            features,
            auxiliary: None,
            strata,
            labeled: labeled_mask,
            outcomes,
            labeled_index,
            num_strata,
            feature_names: (1..=p).map(|j| format!("x{j}")).collect(),
        })
    }

    /// Attaches extra covariates that enter the imputation basis but not the
    /// working model.
    pub fn with_auxiliary(mut self, aux: DMatrix<f64>) -> Result<Self> {
        if aux.nrows() != self.big_n() {
            return Err(Error::validation("auxiliary", "row count differs from features"));
        }
        self.auxiliary = Some(aux);
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::validation("feature_names", "length differs from feature count"));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn big_n(&self) -> usize {
        self.features.nrows()
    }

    pub fn n(&self) -> usize {
        self.labeled_index.len()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_strata(&self) -> usize {
        self.num_strata
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn auxiliary(&self) -> Option<&DMatrix<f64>> {
        self.auxiliary.as_ref()
    }

    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled
    }

    /// Row indices of labeled units, increasing.
    pub fn labeled_index(&self) -> &[usize] {
        &self.labeled_index
    }

    /// Outcomes aligned with [`Self::labeled_index`].
    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// N×(p+1) matrix `[1, x]`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let (rows, p) = self.features.shape();
        let mut x = DMatrix::zeros(rows, p + 1);
        x.column_mut(0).fill(1.0);
        x.columns_mut(1, p).copy_from(&self.features);
        x
    }

    /// Copy with the labeled set replaced; used by the simulation harness.
    pub fn relabeled(&self, labeled_mask: Vec<bool>, outcomes: Vec<f64>) -> Result<Self> {
        let mut d = SemiSupervisedDataset::new(
            self.features.clone(),
            self.strata.clone(),
            labeled_mask,
            outcomes,
        )?;
        d.auxiliary = self.auxiliary.clone();
        d.feature_names = self.feature_names.clone();
        Ok(d)
    }
}

fn check_contiguous(strata: &[usize]) -> Result<usize> {
    let mut seen: Vec<usize> = strata.to_vec();
    seen.sort_unstable();
    seen.dedup();
    let ok = !seen.is_empty() && seen.iter().enumerate().all(|(k, &s)| s == k + 1);
    if ok {
        Ok(seen.len())
    } else {
        Err(Error::StratumRelabel { found: seen })
    }
}

/// Maps arbitrary stratum codes to 1..S by sorted order of the distinct codes.
/// Returns the labels and the sorted codes.
pub fn relabel_strata<T: Ord + Clone>(codes: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut uniq: Vec<T> = codes.to_vec();
    uniq.sort();
    uniq.dedup();
    let labels = codes.iter().map(|c| uniq.binary_search(c).unwrap() + 1).collect();
    (labels, uniq)
}

/// Per-stratum counts, proportions and per-unit IPW weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingDesign {
    /// Labeled count per stratum.
    pub n_s: Vec<usize>,
    /// Total count per stratum.
    pub big_n_s: Vec<usize>,
    /// Sampling fraction n_s / N_s.
    pub pi: Vec<f64>,
    /// N_s / N.
    pub rho: Vec<f64>,
    /// n_s / n.
    pub rho1: Vec<f64>,
    /// Design stratum of each unit, 1-based.
    #[serde(skip)]
    pub unit_stratum: Vec<usize>,
    /// Labeled units covered by this design, increasing.
    #[serde(skip)]
    pub members: Vec<usize>,
    /// Weight of every unit; zero outside `members`.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub n: usize,
    pub big_n: usize,
}

impl SamplingDesign {
    pub fn num_strata(&self) -> usize {
        self.n_s.len()
    }

    /// Weights of `members`, in order.
    pub fn member_weights(&self) -> Vec<f64> {
        self.members.iter().map(|&i| self.weights[i]).collect()
    }

    /// Weights for an arbitrary list of units.
    pub fn weights_at(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.weights[i]).collect()
    }

    /// ζ_i = ρ_s² / ρ_1s² for labeled units, used by the variance-targeting fits.
    pub fn zeta(&self, i: usize) -> f64 {
        let s = self.unit_stratum[i] - 1;
        (self.rho[s] / self.rho1[s]).powi(2)
    }
}

/// Design from the dataset's own strata and labeled set.
pub fn build_design(dataset: &SemiSupervisedDataset) -> Result<SamplingDesign> {
    design_for_subset(dataset, dataset.labeled_index())
}

/// Design treating only `subset` (labeled rows) as sampled, with weights
/// N_s / n_s recomputed from the subset's own counts.
pub fn design_for_subset(dataset: &SemiSupervisedDataset, subset: &[usize]) -> Result<SamplingDesign> {
    design_with_strata(dataset.strata(), dataset.num_strata(), subset)
}

/// Design that ignores strata: every unit in one stratum, so labeled weights
/// are N/n. Used for uniform random sampling and for naive unweighted fits.
pub fn uniform_design(dataset: &SemiSupervisedDataset) -> Result<SamplingDesign> {
    let ones = vec![1usize; dataset.big_n()];
    design_with_strata(&ones, 1, dataset.labeled_index())
}

pub(crate) fn design_with_strata(strata: &[usize], num_strata: usize, subset: &[usize]) -> Result<SamplingDesign> {
    let big_n = strata.len();
    let mut big_n_s = vec![0usize; num_strata];
    for &s in strata {
        big_n_s[s - 1] += 1;
    }
    let mut n_s = vec![0usize; num_strata];
    for &i in subset {
        n_s[strata[i] - 1] += 1;
    }
    if let Some(s) = n_s.iter().position(|&c| c == 0) {
        return Err(Error::EmptyStratum { stratum: s + 1 });
    }
    let n = subset.len();
    let pi: Vec<f64> = n_s.iter().zip(&big_n_s).map(|(&a, &b)| a as f64 / b as f64).collect();
    let rho = big_n_s.iter().map(|&b| b as f64 / big_n as f64).collect();
    let rho1 = n_s.iter().map(|&a| a as f64 / n as f64).collect();
    let mut weights = vec![0.0; big_n];
    for &i in subset {
        let s = strata[i] - 1;
        weights[i] = big_n_s[s] as f64 / n_s[s] as f64;
    }
    let mut members = subset.to_vec();
    members.sort_unstable();
    Ok(SamplingDesign {
        n_s,
        big_n_s,
        pi,
        rho,
        rho1,
        unit_stratum: strata.to_vec(),
        members,
        weights,
        n,
        big_n,
    })
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Working-model covariates, in order.
    pub features: Vec<String>,
    /// Extra covariates for the imputation basis.
    #[serde(default)]
    pub auxiliary: Vec<String>,
    pub stratum: String,
    pub outcome: String,
    /// Outcome values treated as missing.
    #[serde(default = "default_missing")]
    pub missing_markers: Vec<String>,
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "NA".to_string()]
}

impl CsvSchema {
    pub fn new(features: Vec<String>, stratum: &str, outcome: &str) -> Self {
        CsvSchema {
            features,
            auxiliary: Vec::new(),
            stratum: stratum.to_string(),
            outcome: outcome.to_string(),
            missing_markers: default_missing(),
        }
    }
}

/// JSON file pointing at a CSV and describing its columns. Relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: CsvSchema,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<(DatasetManifest, SemiSupervisedDataset)> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let csv_path = if manifest.path.is_absolute() {
            manifest.path.clone()
        } else {
            path.parent().unwrap_or(Path::new(".")).join(&manifest.path)
        };
        let data = load_csv(&csv_path, &manifest.schema)?;
        Ok((manifest, data))
    }
}

/// Reads a CSV with a header row. Rows whose outcome is a missing marker are
/// unlabeled. Stratum codes are relabeled to 1..S by sorted order (numeric
/// when every code parses as an integer). Row numbers in errors count the
/// header as row 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SemiSupervisedDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SemiSupervisedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { row: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found")))
    };
    let feat_cols: Vec<usize> = schema.features.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let aux_cols: Vec<usize> = schema.auxiliary.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let s_col = col(&schema.stratum)?;
    let y_col = col(&schema.outcome)?;

    let mut feats: Vec<f64> = Vec::new();
    let mut aux: Vec<f64> = Vec::new();
    let mut codes: Vec<String> = Vec::new();
    let mut mask = Vec::new();
    let mut outcomes = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse { row, message: format!("missing column {c}") })
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c)?.trim();
            s.parse::<f64>().map_err(|_| Error::Parse { row, message: format!("'{s}' in column '{name}' is not a number") })
        };
        for (&c, name) in feat_cols.iter().zip(&schema.features) {
            feats.push(num(c, name)?);
        }
        for (&c, name) in aux_cols.iter().zip(&schema.auxiliary) {
            aux.push(num(c, name)?);
        }
        codes.push(field(s_col)?.trim().to_string());
        let y_raw = field(y_col)?.trim();
        if schema.missing_markers.iter().any(|m| m == y_raw) {
            mask.push(false);
        } else {
            let y: f64 = y_raw
                .parse()
                .map_err(|_| Error::Parse { row, message: format!("outcome '{y_raw}' is not a number") })?;
            if y != 0.0 && y != 1.0 {
                return Err(Error::Schema(format!("row {row}: outcome {y_raw} is not binary")));
            }
            mask.push(true);
            outcomes.push(y);
        }
    }
    let big_n = mask.len();
    let strata = relabel_codes(&codes);
    let features = DMatrix::from_row_slice(big_n, feat_cols.len(), &feats);
    let mut data = SemiSupervisedDataset::new(features, strata, mask, outcomes)?
        .with_feature_names(schema.features.clone())?;
    if !aux_cols.is_empty() {
        data = data.with_auxiliary(DMatrix::from_row_slice(big_n, aux_cols.len(), &aux))?;
    }
    Ok(data)
}

fn relabel_codes(codes: &[String]) -> Vec<usize> {
    let numeric: Option<Vec<i64>> = codes.iter().map(|c| c.parse::<i64>().ok()).collect();
    match numeric {
        Some(v) => relabel_strata(&v).0,
        None => relabel_strata(codes).0,
    }
}

/// Writes a dataset so that [`load_csv`] with the returned schema reads it back.
pub fn write_csv(dataset: &SemiSupervisedDataset, path: &Path) -> Result<CsvSchema> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let aux_names: Vec<String> = dataset
        .auxiliary()
        .map(|a| (1..=a.ncols()).map(|j| format!("aux{j}")).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = dataset.feature_names().to_vec();
    header.extend(aux_names.iter().cloned());
    header.push("stratum".into());
    header.push("y".into());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    let ys: BTreeMap<usize, f64> =
        dataset.labeled_index().iter().cloned().zip(dataset.outcomes().iter().cloned()).collect();
    for i in 0..dataset.big_n() {
        let mut rec: Vec<String> = dataset.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(a) = dataset.auxiliary() {
            rec.extend(a.row(i).iter().map(|v| format!("{v:?}")));
        }
        rec.push(dataset.strata()[i].to_string());
        rec.push(ys.get(&i).map(|y| format!("{}", *y as u8)).unwrap_or_else(|| "NA".into()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    let mut schema = CsvSchema::new(dataset.feature_names().to_vec(), "stratum", "y");
    schema.auxiliary = aux_names;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SemiSupervisedDataset {
        // strata (1,1,1,1,2,2,2); labeled rows 0,1 in stratum 1 and 4 in stratum 2
        let x = DMatrix::from_row_slice(7, 1, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
        SemiSupervisedDataset::new(
            x,
            vec![1, 1, 1, 1, 2, 2, 2],
            vec![true, true, false, false, true, false, false],
            vec![1.0, 0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn weights_are_inverse_sampling_fractions() {
        let d = build_design(&toy()).unwrap();
        assert_eq!(d.member_weights(), vec![2.0, 2.0, 3.0]);
        assert_eq!(d.weights.iter().sum::<f64>(), 7.0);
        assert_eq!(d.pi, vec![0.5, 1.0 / 3.0]);
        assert_eq!(d.rho1, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn full_labeling_gives_unit_weights() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let data = SemiSupervisedDataset::new(x, vec![1; 4], vec![true; 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = build_design(&data).unwrap();
        assert!(d.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn empty_stratum_is_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let data = SemiSupervisedDataset::new(x, vec![1, 2, 2], vec![true, false, false], vec![1.0]).unwrap();
        assert!(matches!(build_design(&data), Err(Error::EmptyStratum { stratum: 2 })));
    }

    #[test]
    fn non_contiguous_strata_need_relabel() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let err = SemiSupervisedDataset::new(x, vec![1, 3], vec![true, true], vec![1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::StratumRelabel { .. }));
        let (labels, codes) = relabel_strata(&["b", "z", "b", "a"]);
        assert_eq!(labels, vec![2, 3, 2, 1]);
        assert_eq!(codes, vec!["a", "b", "z"]);
    }

    #[test]
    fn non_binary_outcome_is_schema_error() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let err = SemiSupervisedDataset::new(x, vec![1, 1], vec![true, true], vec![1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn uniform_design_ignores_strata() {
        let d = uniform_design(&toy()).unwrap();
        assert_eq!(d.member_weights(), vec![7.0 / 3.0; 3]);
        assert_eq!(d.num_strata(), 1);
    }

    #[test]
    fn zeta_uses_design_proportions() {
        let data = toy();
        let d = build_design(&data).unwrap();
        let expected = (4.0f64 / 7.0 / (2.0 / 3.0)).powi(2);
        assert!((d.zeta(0) - expected).abs() < 1e-15);
    }
}
