//! Python bindings: datasets, networks, preconditioners, chains, and the experiment commands.
//!
//! Vectors cross the boundary as lists of floats; matrices as lists of rows.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use langevin::config::RunConfig;
use langevin::data::{load_idx, make_conjugate_problem, ConjugateRegressionProblem, LabeledDataset};
use langevin::eval::{ensemble_predict, evaluate, metrics, MetricsReport};
use langevin::experiment;
use langevin::linalg::Matrix;
use langevin::model::{Batch, Model, PredictiveOutput, Targets};
use langevin::net::Architecture;
use langevin::params::{BlockLayout, ParamVector};
use langevin::precond::{self, FisherUpdate, Observation, PrecondConfig, PrecondKind, Preconditioner};
use langevin::prior::Prior;
use langevin::rng::{derive_seed, seeded};
use langevin::sgld::{run_chain, ChainConfig, SamplerConfig, Schedule};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: langevin::Error) -> PyErr {
    match e {
        langevin::Error::Divergence { .. } | langevin::Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait PyResultExt<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> PyResultExt<T> for langevin::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Matrix::from_vec(r, c, rows.into_iter().flatten().collect()))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("nll", m.nll)?;
    d.set_item("accuracy", m.accuracy)?;
    Ok(d)
}

fn kind(name: &str) -> PyResult<PrecondKind> {
    name.parse::<PrecondKind>().py()
}

/// Labelled examples with inputs in `[0, 1]`.
#[pyclass(name = "Dataset", module = "langevin_py", frozen)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Self> {
        let inner = LabeledDataset::new(matrix(inputs)?, Targets::Labels(labels)).py()?;
        Ok(Self { inner })
    }

    /// Reads an IDX image/label pair (gzip detected automatically).
    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_idx(images, labels).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn features(&self) -> usize {
        self.inner.features()
    }

    #[getter]
    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes()
    }

    fn head(&self, n: usize) -> Self {
        Self {
            inner: self.inner.head(n),
        }
    }

    /// Seeded split into `(rest, held_out)` with `n` held-out examples.
    fn split(&self, n: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split_count(n, seed).py()?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        rows(self.inner.inputs())
    }

    fn labels(&self) -> PyResult<Vec<usize>> {
        match self.inner.targets() {
            Targets::Labels(l) => Ok(l.clone()),
            Targets::Real(_) => Err(PyValueError::new_err("dataset has real-valued targets")),
        }
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, features={})", self.inner.len(), self.inner.features())
    }
}

/// Softmax classifier with ReLU hidden layers.
#[pyclass(name = "Network", module = "langevin_py", frozen)]
struct PyNetwork {
    arch: Arc<Architecture>,
}

impl PyNetwork {
    fn params(&self, theta: Vec<f64>) -> PyResult<ParamVector> {
        ParamVector::from_values(self.arch.layout().clone(), theta).py()
    }
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (inputs, hidden, classes))]
    fn new(inputs: usize, hidden: Vec<usize>, classes: usize) -> PyResult<Self> {
        Ok(Self {
            arch: Arc::new(Architecture::classifier(inputs, &hidden, classes).py()?),
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.arch.layer_sizes().to_vec()
    }

    /// Sizes of the per-neuron parameter blocks (bias first, then incoming weights).
    fn block_sizes(&self) -> Vec<usize> {
        self.arch.layout().blocks().iter().map(|b| b.size).collect()
    }

    /// Zero biases and `N(0, 1/fan_in)` weights.
    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.arch.init_params(&mut seeded(seed)).into_values()
    }

    /// Class probabilities, one row per input.
    fn predict(&self, theta: Vec<f64>, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        match self.arch.predict(&self.params(theta)?, &matrix(inputs)?).py()? {
            PredictiveOutput::Categorical { probs } => Ok(rows(&probs)),
            PredictiveOutput::Gaussian { mean, .. } => Ok(rows(&mean)),
        }
    }

    /// Mean log-loss and its gradient on `data`.
    fn loss_and_gradient(&self, theta: Vec<f64>, data: &PyDataset) -> PyResult<(f64, Vec<f64>)> {
        let bp = self.arch.backprop(&self.params(theta)?, &data.inner.to_batch()).py()?;
        Ok((bp.mean_loss, bp.gradient.into_values()))
    }

    fn evaluate<'py>(&self, py: Python<'py>, theta: Vec<f64>, data: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(
            py,
            &evaluate(self.arch.as_ref(), &self.params(theta)?, &data.inner).py()?,
        )
    }

    /// Metrics of the probability-averaged ensemble of `members`.
    fn evaluate_ensemble<'py>(
        &self,
        py: Python<'py>,
        members: Vec<Vec<f64>>,
        data: &PyDataset,
    ) -> PyResult<Bound<'py, PyDict>> {
        let members = members
            .into_iter()
            .map(|m| self.params(m))
            .collect::<PyResult<Vec<_>>>()?;
        let out = ensemble_predict(self.arch.as_ref(), &members, data.inner.inputs()).py()?;
        metrics_dict(py, &metrics(&out, data.inner.targets()).py()?)
    }

    fn __repr__(&self) -> String {
        format!("Network({:?})", self.arch.layer_sizes())
    }
}

/// A preconditioner `C` over a network's parameter blocks.
#[pyclass(name = "Preconditioner", module = "langevin_py", frozen)]
struct PyPreconditioner {
    arch: Arc<Architecture>,
    inner: Mutex<Box<dyn Preconditioner>>,
}

impl PyPreconditioner {
    fn with<T>(&self, f: impl FnOnce(&mut dyn Preconditioner) -> langevin::Result<T>) -> PyResult<T> {
        let mut guard = self
            .inner
            .lock()
            .map_err(|_| PyRuntimeError::new_err("preconditioner lock poisoned"))?;
        f(guard.as_mut()).py()
    }

    fn layout(&self) -> &Arc<BlockLayout> {
        self.arch.layout()
    }
}

#[pymethods]
impl PyPreconditioner {
    /// `kind` is one of `identity`, `rmsprop`, `fisher`, `dop`, `qdop`.
    #[new]
    #[pyo3(signature = (network, kind, epsilon = 1e-4))]
    fn new(network: &PyNetwork, kind: &str, epsilon: f64) -> PyResult<Self> {
        let cfg = PrecondConfig {
            epsilon,
            fisher_update: FisherUpdate::ExampleMean,
        };
        let pc = precond::build(self::kind(kind)?, network.arch.layout(), cfg).py()?;
        Ok(Self {
            arch: network.arch.clone(),
            inner: Mutex::new(pc),
        })
    }

    #[getter]
    fn kind(&self) -> PyResult<&'static str> {
        self.with(|p| Ok(p.kind().label()))
    }

    /// Moving-average update from the minibatch `data` at parameters `theta`.
    fn update(&self, theta: Vec<f64>, data: &PyDataset, gamma: f64) -> PyResult<()> {
        let theta = ParamVector::from_values(self.layout().clone(), theta).py()?;
        let batch: Batch = data.inner.to_batch();
        let bp = self.arch.backprop(&theta, &batch).py()?;
        let obs = Observation {
            gradient: &bp.gradient,
            fisher: Some(&bp.per_example),
        };
        self.with(|p| p.update(&obs, gamma))
    }

    /// `C v`.
    fn apply(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut g = ParamVector::from_values(self.layout().clone(), v).py()?;
        self.with(|p| p.apply(&mut g))?;
        Ok(g.into_values())
    }

    /// A draw from `N(0, C)`.
    fn sample_noise(&self, seed: u64) -> PyResult<Vec<f64>> {
        let mut out = ParamVector::zeros(self.layout().clone());
        self.with(|p| p.sample_noise(&mut seeded(seed), &mut out))?;
        Ok(out.into_values())
    }

    /// Dense `C` (small networks only).
    fn matrix(&self) -> PyResult<Vec<Vec<f64>>> {
        let layout = self.layout().clone();
        let m = self.with(|p| p.matrix(&layout))?;
        Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    #[getter]
    fn clamp_events(&self) -> PyResult<usize> {
        self.with(|p| Ok(p.clamp_events()))
    }
}

/// Quasi-diagonal Cholesky factor of one block: `(diag, first_row, clamped)` of `A`.
#[pyfunction]
#[pyo3(signature = (diag, first_row, epsilon = 1e-4))]
fn qd_cholesky(diag: Vec<f64>, first_row: Vec<f64>, epsilon: f64) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let f = precond::qd_cholesky(&diag, &first_row, epsilon).py()?;
    Ok((f.diag, f.first_row, f.clamped))
}

/// Runs one SGLD chain and returns its final state, posterior mean, snapshots, and trace.
#[pyfunction]
#[pyo3(signature = (
    network, train, validation = None, *, preconditioner = "qdop", eta = 0.001, updates = 1000,
    minibatch = 100, burn_in = 500, thin = 100, prior_variance = Some(0.1), halve_every = 10_000,
    eval_every = 100, seed = 1,
))]
#[allow(clippy::too_many_arguments)]
fn sample<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    train: &PyDataset,
    validation: Option<&PyDataset>,
    preconditioner: &str,
    eta: f64,
    updates: u64,
    minibatch: usize,
    burn_in: u64,
    thin: u64,
    prior_variance: Option<f64>,
    halve_every: u64,
    eval_every: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let prior = prior_variance.map(Prior::gaussian).transpose().py()?;
    let config = ChainConfig {
        sampler: SamplerConfig {
            schedule: Schedule::ConstantHalving { eta0: eta, halve_every },
            burn_in,
            thin,
            ..SamplerConfig::default()
        },
        precond: kind(preconditioner)?,
        precond_config: PrecondConfig::default(),
        minibatch,
        updates,
        eval_every,
        noise_seed: derive_seed(seed, 3),
        data_seed: derive_seed(seed, 2),
        train_eval_limit: None,
        keep_snapshots: true,
    };
    let theta0 = network.arch.init_params(&mut seeded(derive_seed(seed, 1)));
    let arch = network.arch.clone();
    let (train, validation) = (train.inner.clone(), validation.map(|v| v.inner.clone()));
    let out = py
        .detach(|| {
            run_chain(
                arch.as_ref(),
                prior.as_ref(),
                &train,
                validation.as_ref(),
                theta0,
                &config,
                &mut |_, _| Ok(()),
            )
        })
        .map_err(|f| py_err(f.error))?;
    let d = PyDict::new(py);
    d.set_item("theta", out.chain.theta.values().to_vec())?;
    d.set_item("mean", out.chain.mean.values().to_vec())?;
    d.set_item(
        "snapshots",
        out.chain
            .snapshots
            .iter()
            .map(|s| s.values().to_vec())
            .collect::<Vec<_>>(),
    )?;
    d.set_item("clamp_events", out.clamp_events)?;
    let trace = out
        .trace
        .iter()
        .map(|r| -> PyResult<Bound<'py, PyDict>> {
            let row = PyDict::new(py);
            row.set_item("step", r.step)?;
            row.set_item("eta", r.eta)?;
            row.set_item("train", metrics_dict(py, &r.train)?)?;
            row.set_item(
                "validation",
                r.validation.as_ref().map(|v| metrics_dict(py, v)).transpose()?,
            )?;
            row.set_item("snapshot_count", r.snapshot_count)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("trace", trace)?;
    Ok(d)
}

/// Linear-Gaussian regression with an isotropic Gaussian prior and its exact posterior.
#[pyclass(name = "ConjugateProblem", module = "langevin_py", frozen)]
struct PyConjugateProblem {
    inner: ConjugateRegressionProblem,
}

#[pymethods]
impl PyConjugateProblem {
    #[new]
    #[pyo3(signature = (n = 50, d = 2, noise_variance = 2.0, prior_variance = 1.0, seed = 0))]
    fn new(n: usize, d: usize, noise_variance: f64, prior_variance: f64, seed: u64) -> PyResult<Self> {
        let prior = DMatrix::identity(d, d) * prior_variance;
        Ok(Self {
            inner: make_conjugate_problem(n, d, noise_variance, prior, seed).py()?,
        })
    }

    #[getter]
    fn post_mean(&self) -> Vec<f64> {
        self.inner.post_mean.iter().copied().collect()
    }

    #[getter]
    fn post_cov(&self) -> Vec<Vec<f64>> {
        self.inner
            .post_cov
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Full-batch chain moments per coordinate, compared with the exact posterior.
    #[pyo3(signature = (preconditioner = "identity", eta = None, steps = 200_000, burn_in = 10_000, seed = 7))]
    fn check_sampler<'py>(
        &self,
        py: Python<'py>,
        preconditioner: &str,
        eta: Option<f64>,
        steps: u64,
        burn_in: u64,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = RunConfig {
            oracle_steps: steps,
            oracle_burn_in: burn_in,
            oracle_n: self.inner.n(),
            ..RunConfig::default()
        };
        let eta = eta.unwrap_or_else(|| experiment::oracle_eta(&cfg));
        let rows = py.detach(|| experiment::oracle_chain(&self.inner, kind(preconditioner)?, &cfg, eta, seed).py())?;
        rows.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("coord", r.coord)?;
                d.set_item("post_mean", r.post_mean)?;
                d.set_item("sample_mean", r.sample_mean)?;
                d.set_item("mcse", r.mcse)?;
                d.set_item("post_var", r.post_var)?;
                d.set_item("sample_var", r.sample_var)?;
                Ok(d)
            })
            .collect()
    }
}

/// Runs `train`, `grid`, or `oracle` with a TOML configuration and `key=value` overrides.
///
/// Returns the path of the output directory.
#[pyfunction]
#[pyo3(signature = (command, config = None, overrides = Vec::new()))]
fn run(py: Python<'_>, command: &str, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<PathBuf> {
    let cfg = match config {
        Some(p) => RunConfig::load(&p, &overrides),
        None => RunConfig::parse("", &overrides),
    }
    .py()?;
    py.detach(|| match command {
        "train" => experiment::run_train(&cfg).map(|_| ()),
        "grid" => experiment::run_grid(&cfg).map(|_| ()),
        "oracle" => experiment::run_oracle(&cfg).map(|_| ()),
        other => Err(langevin::Error::Config {
            key: "command".into(),
            message: format!("unknown command `{other}`"),
        }),
    })
    .py()?;
    Ok(cfg.output_dir)
}

#[pymodule]
fn langevin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyPreconditioner>()?;
    m.add_class::<PyConjugateProblem>()?;
    m.add_function(wrap_pyfunction!(qd_cholesky, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
