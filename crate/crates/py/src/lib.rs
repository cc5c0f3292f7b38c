//! Python bindings for the exoplan pipeline.
//!
//! Structured results cross the boundary as JSON and come back as plain Python
//! dicts and lists.

use std::collections::BTreeMap;
use std::fmt::Display;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use exoplan_core::datagen::{OfflineDataset, Tier};
use exoplan_core::harness::{self, decoder_swapped, ExperimentConfig, TrainSummary};
use exoplan_core::penalize::{Estimator, LearnedPolicy};
use exoplan_core::sepmodel::{EnsembleModel, FactorDecoder};
use exoplan_core::theory::{run_suite, CheckKind, SuiteConfig};
use exoplan_core::{ExBmdpSpec, PolicyTable};

create_exception!(exoplan, ExoplanError, PyException);

fn err(e: impl Display) -> PyErr {
    ExoplanError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Experiment configuration. Keyword arguments override the defaults.
#[pyclass(name = "Config", module = "exoplan")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let file = kwargs.map(|k| from_py(k.as_any())).transpose()?;
        let inner = ExperimentConfig::layered(file.as_ref(), &[]).map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        let inner = ExperimentConfig::layered(Some(&value), &[]).map_err(err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// The config used for grid seed `index`.
    fn for_seed(&self, index: usize) -> Self {
        PyConfig { inner: harness::seed_config(&self.inner, index) }
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, env_seed={}, tier={})", self.inner.seed, self.inner.env_seed, self.inner.tier)
    }
}

#[pyclass(name = "Env", module = "exoplan")]
struct PyEnv {
    spec: ExBmdpSpec,
    decoder: FactorDecoder,
}

fn policy_table(rows: Vec<Vec<f64>>) -> PyResult<PolicyTable> {
    let table = PolicyTable::from_rows(&rows);
    if !table.is_valid(1e-9) {
        return Err(err("policy rows must be probability distributions"));
    }
    Ok(table)
}

#[pymethods]
impl PyEnv {
    #[getter]
    fn n_endo(&self) -> usize {
        self.spec.n_endo
    }

    #[getter]
    fn n_exo(&self) -> usize {
        self.spec.n_exo
    }

    #[getter]
    fn n_act(&self) -> usize {
        self.spec.n_act
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.spec.discount
    }

    fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn to_json(&self) -> String {
        self.spec.to_json()
    }

    /// Exact discounted return of a policy over endogenous states.
    fn exact_return(&self, policy: Vec<Vec<f64>>) -> PyResult<f64> {
        self.spec.exact_return(&policy_table(policy)?).map_err(err)
    }

    /// The optimal endogenous policy as a list of action indices.
    fn optimal_policy(&self) -> PyResult<Vec<usize>> {
        let p = self.spec.endo_mdp().optimal_policy().map_err(err)?;
        p.as_deterministic().ok_or_else(|| err("optimal policy is not deterministic"))
    }

    fn __repr__(&self) -> String {
        format!("Env(n_endo={}, n_exo={}, n_act={})", self.spec.n_endo, self.spec.n_exo, self.spec.n_act)
    }
}

#[pyclass(name = "Dataset", module = "exoplan")]
struct PyDataset {
    inner: OfflineDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn tier(&self) -> String {
        self.inner.tier.to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.trajectories.len()
    }

    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.stats)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }
}

#[pyclass(name = "Model", module = "exoplan")]
struct PyModel {
    model: EnsembleModel,
    summary: TrainSummary,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn n_states(&self) -> usize {
        self.model.n_states
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.model.n_actions
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.summary)
    }

    /// Mean ensemble disagreement over visited state-action pairs.
    fn uncertainty(&self, estimator: &str) -> PyResult<f64> {
        let est: Estimator = estimator.parse().map_err(err)?;
        Ok(harness::model_uncertainty(&self.model, est))
    }

    fn to_json(&self) -> String {
        self.model.to_json()
    }
}

#[pyclass(name = "Policy", module = "exoplan")]
struct PyPolicy {
    inner: LearnedPolicy,
}

#[pymethods]
impl PyPolicy {
    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyPolicy { inner: LearnedPolicy::from_json(text).map_err(err)? })
    }
}

/// Builds the ground-truth environment described by `config`.
#[pyfunction]
fn generate_env(config: &PyConfig) -> PyResult<PyEnv> {
    let spec = harness::generate_env(&config.inner).map_err(err)?;
    let decoder = FactorDecoder::from_spec(&spec, decoder_swapped(config.inner.env_seed));
    Ok(PyEnv { spec, decoder })
}

/// Collects one offline dataset; `tier` defaults to the config's tier.
#[pyfunction]
#[pyo3(signature = (config, env, tier=None))]
fn collect(config: &PyConfig, env: &PyEnv, tier: Option<&str>) -> PyResult<PyDataset> {
    let tier = match tier {
        Some(t) => t.parse::<Tier>().map_err(err)?,
        None => config.inner.tier,
    };
    let inner = harness::collect_tier(&config.inner, &env.spec, tier).map_err(err)?;
    Ok(PyDataset { inner })
}

/// Discovers the partition and fits the model. Only the env's decoder is used.
#[pyfunction]
fn train(config: &PyConfig, dataset: &PyDataset, env: &PyEnv) -> PyResult<PyModel> {
    let out = harness::train(&config.inner, &dataset.inner, &env.decoder).map_err(err)?;
    Ok(PyModel { model: out.model, summary: out.summary })
}

#[pyfunction]
fn plan(config: &PyConfig, model: &PyModel) -> PyResult<PyPolicy> {
    let (_, inner) = harness::plan_policy(&config.inner, &model.model).map_err(err)?;
    Ok(PyPolicy { inner })
}

/// Scores a planned policy in the true environment. `datasets` set the normalization range.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    env: &PyEnv,
    model: &PyModel,
    policy: &PyPolicy,
    datasets: Vec<PyRef<'py, PyDataset>>,
) -> PyResult<Bound<'py, PyAny>> {
    let by_tier: BTreeMap<Tier, OfflineDataset> = datasets.iter().map(|d| (d.inner.tier, d.inner.clone())).collect();
    if by_tier.is_empty() {
        return Err(err("at least one dataset is needed for normalization"));
    }
    let report = harness::evaluate(&config.inner, &env.spec, &env.decoder, &policy.inner, &model.summary, &by_tier)
        .map_err(err)?;
    to_py(py, &report)
}

/// Runs generation, collection, training, planning and evaluation in memory.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let report = py.detach(|| harness::run_pipeline(&cfg)).map_err(err)?;
    to_py(py, &report)
}

/// Runs the theory checks and returns one record per instance.
#[pyfunction]
#[pyo3(signature = (checks=None, instances=100, seed=0, inject_violation=false))]
fn verify_theory<'py>(
    py: Python<'py>,
    checks: Option<Vec<String>>,
    instances: usize,
    seed: u64,
    inject_violation: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let checks = match checks {
        Some(names) => names.iter().map(|c| c.parse::<CheckKind>().map_err(err)).collect::<PyResult<Vec<_>>>()?,
        None => CheckKind::ALL.to_vec(),
    };
    let cfg = SuiteConfig { checks, instances, seed, inject_violation, ..SuiteConfig::default() };
    let outcomes = py.detach(|| run_suite(&cfg));
    to_py(py, &outcomes)
}

#[pymodule]
fn exoplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ExoplanError", m.py().get_type::<ExoplanError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(generate_env, m)?)?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theory, m)?)?;
    Ok(())
}
