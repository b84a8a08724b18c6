//! Python bindings. Structured results cross the boundary as plain Python
//! objects decoded from their JSON form.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use tridrive_core::fitness::{self, homeostasis_feature as core_homeostasis, CompMetricConfig, FitnessVector};
use tridrive_core::model::{FeatureType, Observation, Step, TrajectoryDataset};
use tridrive_core::ope::{self, BootstrapConfig, PolicyProbTable as CorePolicyTable};
use tridrive_core::pareto::{self, Candidate};
use tridrive_core::pipeline::{self, PipelineConfig as CorePipelineConfig, RunOptions};
use tridrive_core::reward::{self, RewardSpec as CoreRewardSpec, SurvivalConfig, SurvivalForm};
use tridrive_core::synth::{self, CohortConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Dataset", module = "tridrive", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: TrajectoryDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: TrajectoryDataset::from_json(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: tridrive_core::model::load_dataset(path).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tridrive_core::model::save_dataset(&self.inner, path).map_err(runtime_err)
    }

    fn feature_ids(&self) -> Vec<String> {
        self.inner.feature_ids().map(str::to_string).collect()
    }

    fn patient_ids(&self) -> Vec<String> {
        self.inner.trajectories.iter().map(|t| t.patient_id.clone()).collect()
    }

    fn survived(&self) -> Vec<bool> {
        self.inner.trajectories.iter().map(|t| t.survived).collect()
    }

    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    /// Per-feature statistical metadata.
    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let md = tridrive_core::features::compute_metadata(&self.inner, None).map_err(value_err)?;
        to_py(py, &md)
    }

    fn split(&self) -> BTreeMap<&'static str, Dataset> {
        pipeline::split_dataset(&self.inner)
            .into_iter()
            .map(|(k, v)| (k, Dataset { inner: v }))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(patients={}, features={}, steps={})",
            self.inner.len(),
            self.inner.feature_schema.len(),
            self.inner.total_steps()
        )
    }
}

#[pyclass(name = "RewardSpec", module = "tridrive", frozen, skip_from_py_object)]
#[derive(Clone)]
struct RewardSpec {
    inner: CoreRewardSpec,
}

#[pymethods]
impl RewardSpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(RewardSpec {
            inner: CoreRewardSpec::from_json(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(RewardSpec {
            inner: CoreRewardSpec::load(path).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    fn features(&self) -> Vec<String> {
        self.inner.features().map(str::to_string).collect()
    }

    fn without_confidence(&self) -> Self {
        RewardSpec {
            inner: self.inner.without_confidence(),
        }
    }

    fn with_lambda(&self, lam: f64) -> Self {
        RewardSpec {
            inner: self.inner.with_lambda(lam),
        }
    }

    /// Potential of one step given `{feature: (value, staleness)}`.
    fn potential(&self, t: u32, obs: BTreeMap<String, (f64, u32)>) -> f64 {
        let mut step = Step::new(t, 0.0);
        for (f, (v, s)) in obs {
            step = step.with_obs(&f, Observation::new(v, s));
        }
        reward::potential(&step, &self.inner)
    }

    /// Discounted return of every trajectory.
    fn returns(&self, dataset: &Dataset) -> PyResult<Vec<f64>> {
        let traces = reward::trace_dataset(&dataset.inner, &self.inner).map_err(value_err)?;
        Ok(traces.iter().map(|t| t.cumulative).collect())
    }

    /// Per-transition rewards of every trajectory.
    fn rewards(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let traces = reward::trace_dataset(&dataset.inner, &self.inner).map_err(value_err)?;
        Ok(traces.into_iter().map(|t| t.rewards).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "RewardSpec(features={:?}, gamma={}, lambda={})",
            self.features(),
            self.inner.gamma,
            self.inner.lambda
        )
    }
}

#[pyclass(name = "PolicyProbTable", module = "tridrive", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PolicyProbTable {
    inner: CorePolicyTable,
}

#[pymethods]
impl PolicyProbTable {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PolicyProbTable {
            inner: CorePolicyTable::from_json(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PolicyProbTable {
            inner: CorePolicyTable::load(path).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Same table with the evaluation policy replaced by the behavior policy.
    fn behavior(&self) -> Self {
        PolicyProbTable {
            inner: pipeline::behavior_table(&self.inner),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.0.len()
    }
}

/// Seeded synthetic cohort: `(dataset, policy_table, reference_spec)`.
#[pyfunction]
#[pyo3(signature = (n_patients=500, seed=42, beta_m=1.0, beta_u=1.0, beta_a=0.2))]
fn synthetic_cohort(
    n_patients: usize,
    seed: u64,
    beta_m: f64,
    beta_u: f64,
    beta_a: f64,
) -> PyResult<(Dataset, PolicyProbTable, RewardSpec)> {
    let cfg = CohortConfig {
        n_patients,
        seed,
        beta_m,
        beta_u,
        beta_a,
        ..CohortConfig::default()
    };
    let cohort = synth::generate(&cfg).map_err(value_err)?;
    Ok((
        Dataset { inner: cohort.dataset },
        PolicyProbTable {
            inner: cohort.policy_table,
        },
        RewardSpec {
            inner: synth::reference_spec(&cfg),
        },
    ))
}

fn parse_form(form: &str, target: Option<f64>, sigma: Option<f64>, tau: Option<f64>) -> PyResult<SurvivalConfig> {
    let need = |x: Option<f64>, name: &str| x.ok_or_else(|| value_err(format!("form '{form}' needs `{name}`")));
    let cfg = match form {
        "bell" => SurvivalConfig::bell(need(target, "target")?, need(sigma, "sigma")?),
        "asymmetric_above" => SurvivalConfig::asymmetric_above(need(target, "target")?, need(sigma, "sigma")?),
        "decay_low" => SurvivalConfig::decay_low(need(tau, "tau")?),
        "decay_high" => SurvivalConfig::decay_high(need(tau, "tau")?),
        other => return Err(value_err(format!("unknown survival form '{other}'"))),
    };
    Ok(cfg)
}

#[pyfunction]
#[pyo3(signature = (value, form, target=None, sigma=None, tau=None))]
fn survival_score(value: f64, form: &str, target: Option<f64>, sigma: Option<f64>, tau: Option<f64>) -> PyResult<f64> {
    let cfg = parse_form(form, target, sigma, tau)?;
    if let SurvivalForm::Bell { sigma, .. } | SurvivalForm::AsymmetricAbove { sigma, .. } = cfg.form {
        if !(sigma > 0.0) {
            return Err(value_err("sigma must be positive"));
        }
    }
    Ok(reward::survival_score(value, &cfg))
}

#[pyfunction]
fn confidence_weight(staleness: f64, tau: f64) -> f64 {
    reward::confidence_weight(staleness, tau)
}

#[pyfunction]
fn time_decay(t: f64, half_life: f64) -> f64 {
    reward::time_decay(t, half_life)
}

#[pyfunction]
#[pyo3(signature = (value, feature_type, interval=None, iqr=None, k=10.0))]
fn homeostasis_feature(
    value: f64,
    feature_type: &str,
    interval: Option<(f64, f64)>,
    iqr: Option<f64>,
    k: f64,
) -> PyResult<f64> {
    let ft = match feature_type {
        "normal_range" => FeatureType::NormalRange,
        "directional_low" => FeatureType::DirectionalLow,
        "directional_high" => FeatureType::DirectionalHigh,
        other => return Err(value_err(format!("unknown feature type '{other}'"))),
    };
    core_homeostasis(value, ft, interval.map(|(a, b)| [a, b]), iqr, k).map_err(value_err)
}

/// Offline fitness vector `(j_surv, j_conf, j_comp)`.
#[pyfunction]
#[pyo3(signature = (dataset, spec, epsilon=2.0, k=10.0, alpha=0.1))]
fn fitness_vector(dataset: &Dataset, spec: &RewardSpec, epsilon: f64, k: f64, alpha: f64) -> PyResult<(f64, f64, f64)> {
    let cfg = CompMetricConfig {
        epsilon,
        k,
        alpha,
        ..CompMetricConfig::default()
    };
    let f = fitness::fitness(&dataset.inner, &spec.inner, &cfg).map_err(value_err)?;
    Ok((f.j_surv, f.j_conf, f.j_comp))
}

fn candidates(items: Vec<(String, (f64, f64, f64))>) -> Vec<Candidate> {
    items
        .into_iter()
        .map(|(id, (a, b, c))| Candidate::new(id, FitnessVector::new(a, b, c)))
        .collect()
}

/// Non-dominated fronts of `[(spec_id, (j_surv, j_conf, j_comp))]`.
#[pyfunction]
fn non_dominated_sort(items: Vec<(String, (f64, f64, f64))>) -> PyResult<Vec<Vec<String>>> {
    pareto::non_dominated_sort(&candidates(items)).map_err(value_err)
}

/// Fronts, crowding distances, utopia point and champion.
#[pyfunction]
fn select_champion<'py>(py: Python<'py>, items: Vec<(String, (f64, f64, f64))>) -> PyResult<Bound<'py, PyAny>> {
    let res = pareto::select_champion(&candidates(items)).map_err(value_err)?;
    to_py(py, &res)
}

/// Trajectory-level weighted importance sampling estimate.
#[pyfunction]
fn wis(dataset: &Dataset, spec: &RewardSpec, table: &PolicyProbTable) -> PyResult<f64> {
    let traces = reward::trace_dataset(&dataset.inner, &spec.inner).map_err(value_err)?;
    ope::wis(&dataset.inner, &traces, &table.inner).map_err(value_err)
}

/// WIS with a percentile bootstrap interval.
#[pyfunction]
#[pyo3(signature = (dataset, spec, table, resamples=1000, level=0.95, seed=0, max_ratio=None))]
#[allow(clippy::too_many_arguments)]
fn bootstrap_ci<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    spec: &RewardSpec,
    table: &PolicyProbTable,
    resamples: usize,
    level: f64,
    seed: u64,
    max_ratio: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = BootstrapConfig {
        level,
        resamples,
        seed,
        max_ratio,
    };
    let traces = reward::trace_dataset(&dataset.inner, &spec.inner).map_err(value_err)?;
    let est = ope::bootstrap_ci(&dataset.inner, &traces, &table.inner, &cfg).map_err(value_err)?;
    to_py(py, &est)
}

/// Mortality rate per return quantile bin.
#[pyfunction]
#[pyo3(signature = (dataset, spec, n_bins=10))]
fn mortality_curve<'py>(py: Python<'py>, dataset: &Dataset, spec: &RewardSpec, n_bins: usize) -> PyResult<Bound<'py, PyAny>> {
    let traces = reward::trace_dataset(&dataset.inner, &spec.inner).map_err(value_err)?;
    let bins = ope::mortality_curve(&dataset.inner, &traces, n_bins).map_err(value_err)?;
    to_py(py, &bins)
}

/// Default pipeline configuration as a dict.
#[pyfunction]
fn default_config<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &CorePipelineConfig::default())
}

/// Runs the full pipeline into `out`; returns the run manifest.
#[pyfunction]
#[pyo3(signature = (out, config=None, resume=false))]
fn run_pipeline<'py>(py: Python<'py>, out: PathBuf, config: Option<&str>, resume: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(text) => CorePipelineConfig::from_json(text).map_err(value_err)?,
        None => CorePipelineConfig::default(),
    };
    let opts = RunOptions {
        resume,
        ..RunOptions::default()
    };
    let report = py
        .detach(|| pipeline::run_pipeline(&cfg, &out, &opts))
        .map_err(|e| match e.exit_code() {
            2 => value_err(e),
            _ => runtime_err(e),
        })?;
    to_py(py, &report.manifest)
}

#[pymodule]
fn tridrive(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<RewardSpec>()?;
    m.add_class::<PolicyProbTable>()?;
    m.add_function(wrap_pyfunction!(synthetic_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(survival_score, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_weight, m)?)?;
    m.add_function(wrap_pyfunction!(time_decay, m)?)?;
    m.add_function(wrap_pyfunction!(homeostasis_feature, m)?)?;
    m.add_function(wrap_pyfunction!(fitness_vector, m)?)?;
    m.add_function(wrap_pyfunction!(non_dominated_sort, m)?)?;
    m.add_function(wrap_pyfunction!(select_champion, m)?)?;
    m.add_function(wrap_pyfunction!(wis, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(mortality_curve, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
