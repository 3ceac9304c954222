//! Python bindings. Tensors cross the boundary as flat `list[float]` plus a
//! shape; per-example gradients as `list[list[float]]`.

// pyo3 0.22 macro expansion trips this lint on every `PyResult` method.
#![allow(clippy::useless_conversion)]

use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use advopt::ad::{self, Graph, ParamVector, PerExampleGrads};
use advopt::attacks::{pgd_batch, AttackConfig};
use advopt::fast_engm::{self, GammaState};
use advopt::harness::{self, HarnessError, RunResult};
use advopt::models::{self, build_model, ModelSpec};
use advopt::optim::{self, GradInput, OptimKind, OptimState};
use advopt::stats::{self, EpochStats};
use advopt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(value_err)
}

fn rows(peg: &PerExampleGrads) -> Vec<Vec<f64>> {
    peg.iter_rows().map(<[f64]>::to_vec).collect()
}

fn peg(rows: &[Vec<f64>]) -> PyResult<PerExampleGrads> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("rows must be non-empty and of equal length"));
    }
    Ok(PerExampleGrads::from_rows(rows))
}

/// Training configuration: defaults, then `key = value` text, then overrides.
#[pyclass(name = "TrainConfig", module = "advopt_py")]
#[derive(Clone)]
struct PyTrainConfig {
    inner: harness::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = "", overrides = vec![]))]
    fn new(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        harness::TrainConfig::from_text(text, &overrides).map(|inner| Self { inner }).map_err(harness_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = vec![]))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        harness::TrainConfig::load(&path, &overrides).map(|inner| Self { inner }).map_err(harness_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(PyValueError::new_err)?;
        self.inner.validate().map_err(harness_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({} epochs, optimizer {}, eps {})", self.inner.epochs, self.inner.optim.kind, self.inner.attack.epsilon)
    }
}

fn epoch_dict<'py>(py: Python<'py>, h: &EpochStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("epoch", h.epoch)?;
    for (k, v) in [
        ("mu", h.mu),
        ("sigma2", h.sigma2),
        ("pearson_r", h.pearson_r),
        ("weight_err_pct", h.weight_err_pct),
        ("nat_acc", h.nat_acc),
        ("rob_acc", h.rob_acc),
        ("lr", h.lr),
        ("gamma0", h.gamma0),
        ("gamma1", h.gamma1),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Outcome of [`train`].
#[pyclass(name = "RunResult", module = "advopt_py")]
struct PyRunResult {
    inner: RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn backward_passes(&self) -> usize {
        self.inner.backward_passes
    }

    #[getter]
    fn last_params(&self) -> Vec<f64> {
        self.inner.last_params.data.clone()
    }

    #[getter]
    fn best_params(&self) -> Vec<f64> {
        self.inner.best_params.data.clone()
    }

    /// Per-epoch statistics as a list of dicts (NaN where undefined).
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.history.iter().map(|h| epoch_dict(py, h)).collect()
    }

    /// Summary as a JSON string.
    fn summary_json(&self) -> String {
        serde_json::to_string(&self.inner.summary).expect("summary serializes")
    }

    /// Writes stats, summary, config and checkpoints into `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        harness::write_run(&self.inner, &dir).map_err(harness_err)
    }
}

#[pyfunction]
fn train(py: Python<'_>, config: &PyTrainConfig) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    py.allow_threads(|| harness::train(&cfg)).map(|inner| PyRunResult { inner }).map_err(harness_err)
}

/// Attack settings; strings follow the config file (`linf`/`l2`, `ce`/`margin`).
#[pyclass(name = "Attack", module = "advopt_py")]
#[derive(Clone)]
struct PyAttack {
    inner: AttackConfig,
}

#[pymethods]
impl PyAttack {
    #[new]
    #[pyo3(signature = (epsilon = 8.0 / 255.0, steps = 10, step_size = 2.0 / 255.0, norm = "linf", loss = "ce", random_start = true))]
    fn new(epsilon: f64, steps: usize, step_size: f64, norm: &str, loss: &str, random_start: bool) -> PyResult<Self> {
        let inner = AttackConfig {
            norm: norm.parse().map_err(PyValueError::new_err)?,
            epsilon,
            steps,
            step_size,
            loss: loss.parse().map_err(PyValueError::new_err)?,
            random_start,
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A network together with its parameters.
#[pyclass(name = "Model", module = "advopt_py")]
struct PyModel {
    graph: Graph,
    params: ParamVector,
}

impl PyModel {
    fn batch(&self, x: Vec<f64>, labels: &[usize]) -> PyResult<Tensor> {
        let mut shape = vec![labels.len()];
        shape.extend(self.graph.input_shape());
        tensor(x, shape)
    }
}

#[pymethods]
impl PyModel {
    /// `arch` is `mlp` or `cnn-small`; `hidden` lists layer widths or channel counts.
    #[new]
    #[pyo3(signature = (input_shape, hidden, classes, arch = "mlp", seed = 0))]
    fn new(input_shape: Vec<usize>, hidden: Vec<usize>, classes: usize, arch: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec { architecture: arch.parse().map_err(value_err)?, input_shape, hidden, classes, seed };
        let (graph, params) = build_model(&spec).map_err(value_err)?;
        Ok(Self { graph, params })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.len()
    }

    #[getter]
    fn get_params(&self) -> Vec<f64> {
        self.params.data.clone()
    }

    #[setter]
    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.params = ParamVector::new(values, self.params.layout.clone()).map_err(value_err)?;
        Ok(())
    }

    /// Per-example losses and flat logits for a batch given as a flat list.
    fn forward(&self, x: Vec<f64>, labels: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let batch = self.batch(x, &labels)?;
        let (losses, logits) = ad::forward(&self.graph, &self.params, &batch, &labels).map_err(value_err)?;
        Ok((losses, logits.into_data()))
    }

    /// Gradient of the mean loss.
    fn grad(&self, x: Vec<f64>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        let batch = self.batch(x, &labels)?;
        ad::backward_batch(&self.graph, &self.params, &batch, &labels).map_err(value_err)
    }

    fn per_example_grads(&self, x: Vec<f64>, labels: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let batch = self.batch(x, &labels)?;
        ad::per_example_grads(&self.graph, &self.params, &batch, &labels).map(|p| rows(&p)).map_err(value_err)
    }

    fn input_grads(&self, x: Vec<f64>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        let batch = self.batch(x, &labels)?;
        ad::input_grads(&self.graph, &self.params, &batch, &labels).map(Tensor::into_data).map_err(value_err)
    }

    fn predict(&self, x: Vec<f64>, n: usize) -> PyResult<Vec<usize>> {
        let mut shape = vec![n];
        shape.extend(self.graph.input_shape());
        models::predict(&self.graph, &self.params, &tensor(x, shape)?).map_err(value_err)
    }

    /// PGD adversarial examples, flat, with the attack loss before and after.
    #[pyo3(signature = (x, labels, attack, seed = 0))]
    fn pgd(&self, x: Vec<f64>, labels: Vec<usize>, attack: &PyAttack, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let batch = self.batch(x, &labels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = pgd_batch(&self.graph, &self.params, &batch, &labels, &attack.inner, &mut rng).map_err(value_err)?;
        Ok((out.adversarial.into_data(), out.clean_loss, out.loss))
    }
}

/// Momentum optimizer state for any of the outer optimizers.
#[pyclass(name = "Optimizer", module = "advopt_py")]
struct PyOptimizer {
    inner: OptimState,
}

#[pymethods]
impl PyOptimizer {
    #[new]
    #[pyo3(signature = (kind, num_params, lr = 0.1, momentum = 0.9, alpha = 1.0))]
    fn new(kind: &str, num_params: usize, lr: f64, momentum: f64, alpha: f64) -> PyResult<Self> {
        let kind: OptimKind = kind.parse().map_err(value_err)?;
        OptimState::new(kind, num_params, momentum, lr, alpha).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.name()
    }

    #[getter]
    fn get_lr(&self) -> f64 {
        self.inner.lr
    }

    #[setter]
    fn set_lr(&mut self, lr: f64) {
        self.inner.lr = lr;
    }

    /// Applies one step to `model` from a mean (msgd, mgnc), summed (sngm) or
    /// per-example (engm, fengm) gradient.
    #[pyo3(signature = (model, grad = None, per_example = None))]
    fn step(&mut self, model: &mut PyModel, grad: Option<Vec<f64>>, per_example: Option<Vec<Vec<f64>>>) -> PyResult<()> {
        let rows_peg;
        let input = match (self.inner.kind, &grad, &per_example) {
            (OptimKind::Sngm, Some(g), None) => GradInput::Summed(g),
            (k, None, Some(r)) if k.needs_per_example() => {
                rows_peg = peg(r)?;
                GradInput::PerExample(&rows_peg)
            }
            (k, Some(g), None) if !k.needs_per_example() && !k.is_fast() => GradInput::Mean(g),
            (k, ..) => return Err(PyValueError::new_err(format!("{k} needs exactly one matching gradient argument"))),
        };
        optim::step(&mut self.inner, input, &mut model.params).map_err(value_err)
    }

    /// One fast ENGM update on a batch (already perturbed); returns diagnostics.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (model, gamma, x, labels, alpha, weight_decay = 0.0))]
    fn fast_step<'py>(
        &mut self,
        py: Python<'py>,
        model: &mut PyModel,
        gamma: &mut PyGamma,
        x: Vec<f64>,
        labels: Vec<usize>,
        alpha: f64,
        weight_decay: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let batch = model.batch(x, &labels)?;
        let d = fast_engm::fast_engm_update(
            &model.graph,
            &mut model.params,
            &mut self.inner,
            &mut gamma.inner,
            &batch,
            &labels,
            alpha,
            weight_decay,
            None,
        )
        .map_err(value_err)?;
        let out = PyDict::new_bound(py);
        out.set_item("step", d.step)?;
        out.set_item("refreshed", d.refreshed)?;
        out.set_item("gamma0", d.gamma0)?;
        out.set_item("gamma1", d.gamma1)?;
        out.set_item("weight_err_pct", d.weight_err_pct)?;
        out.set_item("backward_passes", d.backward_passes)?;
        out.set_item("mean_weight", d.mean_weight)?;
        Ok(out)
    }
}

/// Regression state of the fast ENGM variants.
#[pyclass(name = "Gamma", module = "advopt_py")]
struct PyGamma {
    inner: GammaState,
}

#[pymethods]
impl PyGamma {
    #[new]
    #[pyo3(signature = (beta_gamma = 0.7, tau = 50, naive = false))]
    fn new(beta_gamma: f64, tau: usize, naive: bool) -> PyResult<Self> {
        GammaState::new(beta_gamma, tau, naive).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn gamma0(&self) -> f64 {
        self.inner.gamma0
    }

    #[getter]
    fn gamma1(&self) -> f64 {
        self.inner.gamma1
    }
}

#[pyfunction]
fn clip_transform(v: Vec<f64>, alpha: f64) -> Vec<f64> {
    optim::clip_transform(&v, alpha)
}

#[pyfunction]
fn grad_mu(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    stats::grad_mu(&peg(&rows)?).map_err(value_err)
}

#[pyfunction]
fn grad_sigma2(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    stats::grad_sigma2(&peg(&rows)?).map_err(value_err)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    stats::pearson(&xs, &ys).map_err(value_err)
}

#[pyfunction]
fn overfitting_pct(best: f64, last: f64) -> PyResult<f64> {
    stats::overfitting_pct(best, last).map_err(value_err)
}

/// Least-squares `(slope, intercept)`.
#[pyfunction]
fn linreg(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64)> {
    fast_engm::linreg(&xs, &ys).map(|f| (f.slope, f.intercept)).map_err(value_err)
}

#[pyfunction]
fn estimate_weights(input_grad_norms: Vec<f64>, gamma0: f64, gamma1: f64, alpha: f64) -> PyResult<Vec<f64>> {
    let state = GammaState { gamma0, gamma1, ..GammaState::new(0.7, 1, false).map_err(value_err)? };
    fast_engm::estimate_weights(&input_grad_norms, &state, alpha).map(|w| w.weights).map_err(value_err)
}

#[pymodule]
fn advopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyAttack>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyOptimizer>()?;
    m.add_class::<PyGamma>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(clip_transform, m)?)?;
    m.add_function(wrap_pyfunction!(grad_mu, m)?)?;
    m.add_function(wrap_pyfunction!(grad_sigma2, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(overfitting_pct, m)?)?;
    m.add_function(wrap_pyfunction!(linreg, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_weights, m)?)?;
    Ok(())
}
