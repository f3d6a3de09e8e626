//! Python bindings. Results cross the boundary as plain dicts and lists built
//! from the library's JSON serialization.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use stratssl::allocation::{neyman as neyman_rs, AllocationInput};
use stratssl::data::DatasetManifest;
use stratssl::pipeline::{analyze as analyze_rs, AnalysisConfig};
use stratssl::simulation::{generate as generate_rs, oracle as oracle_rs, run_study, Profile, Sampling, ScenarioId, ScenarioSpec, StudyOptions};
use stratssl::SemiSupervisedDataset;

create_exception!(stratssl, StratsslError, PyException, "Invalid input or configuration.");
create_exception!(stratssl, NumericalError, StratsslError, "A numerical routine failed.");

fn to_py(e: stratssl::Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        StratsslError::new_err(e.to_string())
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| StratsslError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to_json<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<Option<T>> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else { return Ok(None) };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map(Some).map_err(|e| StratsslError::new_err(format!("config: {e}")))
}

/// Covariates for all units with outcomes for the labeled ones.
#[pyclass(name = "Dataset", module = "stratssl", frozen)]
struct PyDataset {
    inner: SemiSupervisedDataset,
}

#[pymethods]
impl PyDataset {
    /// `features` is a list of rows, `strata` holds labels in 1..S, and
    /// `outcomes` has one 0/1 value per labeled row in row order.
    #[new]
    fn new(features: Vec<Vec<f64>>, strata: Vec<usize>, labeled: Vec<bool>, outcomes: Vec<f64>) -> PyResult<Self> {
        let n = features.len();
        let p = features.first().map_or(0, |r| r.len());
        if features.iter().any(|r| r.len() != p) {
            return Err(StratsslError::new_err("features: rows differ in length"));
        }
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        let inner = SemiSupervisedDataset::new(DMatrix::from_row_slice(n, p, &flat), strata, labeled, outcomes).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Loads a dataset from a JSON manifest pointing at a CSV.
    #[staticmethod]
    fn from_manifest(path: PathBuf) -> PyResult<Self> {
        let (_, inner) = DatasetManifest::load(&path).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn big_n(&self) -> usize {
        self.inner.big_n()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn num_strata(&self) -> usize {
        self.inner.num_strata()
    }

    #[getter]
    fn strata(&self) -> Vec<usize> {
        self.inner.strata().to_vec()
    }

    #[getter]
    fn labeled(&self) -> Vec<bool> {
        self.inner.labeled_mask().to_vec()
    }

    #[getter]
    fn outcomes(&self) -> Vec<f64> {
        self.inner.outcomes().to_vec()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        let x = self.inner.features();
        (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(N={}, n={}, p={}, strata={})", self.inner.big_n(), self.inner.n(), self.inner.p(), self.inner.num_strata())
    }
}

/// Default analysis configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &AnalysisConfig::default())
}

/// Runs the estimators on `dataset`. `config` is a dict in the analysis
/// configuration schema; omitted fields take their defaults.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn analyze<'py>(py: Python<'py>, dataset: &PyDataset, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: AnalysisConfig = py_to_json(py, config)?.unwrap_or_default();
    let data = dataset.inner.clone();
    let result = py.detach(move || analyze_rs(&data, &cfg)).map_err(to_py)?;
    json_to_py(py, &result)
}

/// Neyman allocation of `budget` labels given stratum shares and influence SDs.
#[pyfunction]
#[pyo3(signature = (rho, sigma, budget, shrinkage=0.0))]
fn neyman(py: Python<'_>, rho: Vec<f64>, sigma: Vec<f64>, budget: usize, shrinkage: f64) -> PyResult<Bound<'_, PyAny>> {
    let input = AllocationInput { rho, sigma, budget, shrinkage };
    let a = neyman_rs(&input).map_err(to_py)?;
    json_to_py(py, &a)
}

fn scenario(name: &str, n_per_stratum: Option<usize>, big_n: Option<usize>, strata: Option<usize>) -> PyResult<ScenarioSpec> {
    let mut spec = ScenarioSpec::preset(ScenarioId::parse(name).map_err(to_py)?);
    if let Some(s) = strata {
        spec.strata = s;
    }
    if let Some(n) = n_per_stratum {
        spec.sampling = Sampling::Stratified { n_per_stratum: vec![n] };
    }
    if let Some(n) = big_n {
        spec.big_n = n;
    }
    spec.validate().map_err(to_py)?;
    Ok(spec)
}

/// Draws one population and labeled sample from a scenario preset.
#[pyfunction]
#[pyo3(signature = (scenario_name, seed, n_per_stratum=None, big_n=None, strata=None))]
fn generate(scenario_name: &str, seed: u64, n_per_stratum: Option<usize>, big_n: Option<usize>, strata: Option<usize>) -> PyResult<PyDataset> {
    let spec = scenario(scenario_name, n_per_stratum, big_n, strata)?;
    Ok(PyDataset { inner: generate_rs(&spec, seed).map_err(to_py)?.dataset })
}

/// Population target values of a scenario preset.
#[pyfunction]
#[pyo3(signature = (scenario_name, strata=None))]
fn oracle<'py>(py: Python<'py>, scenario_name: &str, strata: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let spec = scenario(scenario_name, None, None, strata)?;
    let truth = py.detach(move || oracle_rs(&spec)).map_err(to_py)?;
    json_to_py(py, &truth)
}

/// Monte Carlo study of a scenario preset under a size profile.
#[pyfunction]
#[pyo3(signature = (scenario_name, seed, profile="smoke", replications=None, strata=None, n_per_stratum=None))]
fn simulate<'py>(
    py: Python<'py>,
    scenario_name: &str,
    seed: u64,
    profile: &str,
    replications: Option<usize>,
    strata: Option<usize>,
    n_per_stratum: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = scenario(scenario_name, n_per_stratum, None, strata)?;
    spec.seed = seed;
    let mut cfg = spec.default_analysis();
    Profile::parse(profile).map_err(to_py)?.apply(&mut spec, &mut cfg);
    if let Some(r) = replications {
        spec.replications = r;
    }
    let report = py.detach(move || run_study(&spec, &cfg, &StudyOptions::default())).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pymodule]
#[pyo3(name = "stratssl")]
fn stratssl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", stratssl::VERSION)?;
    m.add("StratsslError", py.get_type::<StratsslError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(neyman, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
