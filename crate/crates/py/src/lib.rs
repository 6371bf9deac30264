//! Python bindings: models, task batches, curvature and noise probes, and the
//! training harness.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde_json::json;

use linattn_core::harness::{
    self, find_preset, ExperimentConfig, OptimizerName, ReproduceOptions, Target, PRESETS,
};
use linattn_core::model::{self, Layout, ModelParams, Variant};
use linattn_core::probes::{self, SmoothnessRecord, SmoothnessTrace};
use linattn_core::rng::{stream, Purpose};
use linattn_core::tasks::{sample_batch, CovariateLaw, TaskBatch, TaskSpec};
use linattn_core::Error;

create_exception!(linattn, LinattnError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownTarget { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => LinattnError::new_err(format!("{}: {other}", other.kind())),
    }
}

fn from_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LinattnError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(value: serde_json::Value, what: &str) -> PyResult<T> {
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(format!("bad {what}: {e}")))
}

fn optimizer(name: &str) -> PyResult<OptimizerName> {
    parse(json!(name), "optimizer name")
}

/// A batch of regression prompts with hidden targets.
#[pyclass(name = "Batch", module = "linattn", frozen)]
struct PyBatch {
    inner: TaskBatch,
}

#[pymethods]
impl PyBatch {
    /// Draws `count` prompts. `law` is one of "gaussian", "sphere",
    /// "gamma_scaled_sphere" (uses `shape`, `scale`) or "mlp_distorted" (uses `mlp_seed`).
    #[staticmethod]
    #[pyo3(signature = (d, n, count, seed, law="gaussian", shape=0.1, scale=10.0, mlp_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        d: usize,
        n: usize,
        count: usize,
        seed: u64,
        law: &str,
        shape: f64,
        scale: f64,
        mlp_seed: u64,
    ) -> PyResult<Self> {
        let covariates: CovariateLaw = parse(
            json!({ "law": law, "shape": shape, "scale": scale, "mlp_seed": mlp_seed }),
            "covariate law",
        )?;
        let spec = TaskSpec::new(d, n, covariates).map_err(err)?;
        let inner = sample_batch(&spec, count, &mut stream(seed, Purpose::Misc)).map_err(err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn targets(&self) -> Vec<f64> {
        self.inner.targets.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.weights.clone()
    }

    /// Prompt matrices as nested row lists, (d+1) × (n+1) each.
    #[getter]
    fn prompts(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .prompts
            .iter()
            .map(|p| {
                let z = p.matrix();
                (0..z.rows()).map(|r| (0..z.cols()).map(|c| z.get(r, c)).collect()).collect()
            })
            .collect()
    }
}

/// Parameters of a stacked linear-attention model.
#[pyclass(name = "Model", module = "linattn")]
struct PyModel {
    params: ModelParams,
}

impl PyModel {
    fn vector(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        if values.len() != self.params.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                self.params.len(),
                values.len()
            )));
        }
        Ok(values)
    }

    fn step_size(&self, h: Option<f64>) -> f64 {
        h.unwrap_or_else(|| probes::fd_step(&self.params))
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (layers, d, variant="single_q", init_std=0.02, seed=0, front_mlp=None))]
    fn new(layers: usize, d: usize, variant: &str, init_std: f64, seed: u64, front_mlp: Option<usize>) -> PyResult<Self> {
        let variant: Variant = parse(json!(variant), "variant")?;
        let layout = Layout::new(variant, layers, d, front_mlp).map_err(err)?;
        let params = ModelParams::init(layout, init_std, &mut stream(seed, Purpose::Init)).map_err(err)?;
        Ok(Self { params })
    }

    fn __len__(&self) -> usize {
        self.params.len()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.params.as_slice().to_vec()
    }

    #[setter]
    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        let values = self.vector(values)?;
        self.params.as_mut_slice().copy_from_slice(&values);
        Ok(())
    }

    fn loss(&self, py: Python<'_>, batch: &PyBatch) -> PyResult<f64> {
        py.detach(|| model::loss_batch(&self.params, &batch.inner)).map_err(err)
    }

    fn grad(&self, py: Python<'_>, batch: &PyBatch) -> PyResult<Vec<f64>> {
        py.detach(|| model::grad_batch(&self.params, &batch.inner))
            .map(|g| g.into_vec())
            .map_err(err)
    }

    fn predict(&self, py: Python<'_>, batch: &PyBatch) -> PyResult<Vec<f64>> {
        py.detach(|| model::predict_batch(&self.params, &batch.inner)).map_err(err)
    }

    /// Hessian-vector product by central differences of gradients.
    #[pyo3(signature = (batch, v, h=None))]
    fn hvp(&self, py: Python<'_>, batch: &PyBatch, v: Vec<f64>, h: Option<f64>) -> PyResult<Vec<f64>> {
        let v = self.vector(v)?;
        let h = self.step_size(h);
        py.detach(|| probes::hvp(&self.params, &batch.inner, &v, h))
            .map(|g| g.into_vec())
            .map_err(err)
    }

    #[pyo3(signature = (batch, h=None))]
    fn hessian_diagonal(&self, py: Python<'_>, batch: &PyBatch, h: Option<f64>) -> PyResult<Vec<f64>> {
        let h = self.step_size(h);
        py.detach(|| probes::hessian_diagonal(&self.params, &batch.inner, h)).map_err(err)
    }

    #[pyo3(signature = (batch, step, h=None))]
    fn directional_smoothness(&self, py: Python<'_>, batch: &PyBatch, step: Vec<f64>, h: Option<f64>) -> PyResult<f64> {
        let step = self.vector(step)?;
        let h = self.step_size(h);
        py.detach(|| probes::directional_smoothness(&self.params, &batch.inner, &step, h)).map_err(err)
    }
}

/// `max|diag| / median|diag|`, or None when the median is not positive.
#[pyfunction]
fn robust_condition_number(diag: Vec<f64>) -> PyResult<Option<f64>> {
    probes::robust_condition_number(&diag).map(|c| c.value()).map_err(err)
}

/// Affine fit `smoothness ≈ l0 + l1 · grad_norm`.
#[pyfunction]
fn fit_generalized_smoothness<'py>(
    py: Python<'py>,
    grad_norms: Vec<f64>,
    smoothness: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    if grad_norms.len() != smoothness.len() {
        return Err(PyValueError::new_err("grad_norms and smoothness differ in length"));
    }
    let trace = SmoothnessTrace {
        records: grad_norms
            .into_iter()
            .zip(smoothness)
            .enumerate()
            .map(|(i, (grad_norm, directional_smoothness))| SmoothnessRecord {
                iteration: i,
                grad_norm,
                directional_smoothness,
            })
            .collect(),
    };
    from_json(py, &probes::fit_generalized_smoothness(&trace).map_err(err)?)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

/// A preset rendered as a TOML experiment config.
#[pyfunction]
#[pyo3(signature = (name, optimizer="adam"))]
fn preset_config(name: &str, optimizer: &str) -> PyResult<String> {
    let opt = self::optimizer(optimizer)?;
    find_preset(name).map_err(err)?.config(opt).to_toml().map_err(err)
}

fn config(toml: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(toml).map_err(err)
}

/// Trains one seed of a TOML config and returns the full trace as a dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_toml: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let c = config(config_toml)?;
    let trace = py.detach(|| harness::run_training(&c, seed)).map_err(err)?;
    from_json(py, &trace)
}

#[pyfunction]
#[pyo3(signature = (config_toml, lrs=None, seeds=None))]
fn grid_search<'py>(
    py: Python<'py>,
    config_toml: &str,
    lrs: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let c = config(config_toml)?;
    let lrs = lrs.or_else(|| c.optimizer.lr_grid.clone()).unwrap_or_else(harness::default_lr_grid);
    let seeds = seeds.unwrap_or_else(|| c.seeds.clone());
    let result = py.detach(|| harness::grid_search(&c, &lrs, &seeds)).map_err(err)?;
    from_json(py, &result)
}

/// Gradient-noise report at initialization for the config's task and model.
#[pyfunction]
fn noise_at_init<'py>(py: Python<'py>, config_toml: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let c = config(config_toml)?;
    let report = py.detach(|| harness::noise_at_init(&c, seed)).map_err(err)?;
    from_json(py, &report)
}

/// Regenerates one target's artifacts below `root`; returns the output
/// directory and the summary.
#[pyfunction]
#[pyo3(signature = (target, root, seeds=None, iterations=None))]
fn reproduce<'py>(
    py: Python<'py>,
    target: &str,
    root: &str,
    seeds: Option<Vec<u64>>,
    iterations: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let target: Target = target.parse().map_err(err)?;
    let mut options = ReproduceOptions::new(root);
    if let Some(seeds) = seeds {
        options.seeds = seeds;
    }
    options.iterations = iterations;
    let outcome = py.detach(|| harness::reproduce(target, &options)).map_err(err)?;
    from_json(py, &json!({ "dir": outcome.dir, "summary": outcome.summary }))
}

#[pymodule]
fn linattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LinattnError", m.py().get_type::<LinattnError>())?;
    m.add_class::<PyBatch>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(robust_condition_number, m)?)?;
    m.add_function(wrap_pyfunction!(fit_generalized_smoothness, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(noise_at_init, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    Ok(())
}
