//! Python bindings: tensors, masks, graphs, the solver, the scenario
//! generator and scoring.

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wdgtc::graph::{self, GraphPenalty};
use wdgtc::metrics::{self, ParamGrid, SearchStrategy};
use wdgtc::synth::{self, MissingPattern};
use wdgtc::nalgebra::DMatrix;
use wdgtc::tensor::{self, CpModel};
use wdgtc::{io, solver, WdgError};

create_exception!(pywdgtc, WdgtcError, PyValueError, "Invalid input or degenerate problem.");

fn py_err(e: WdgError) -> PyErr {
    match e {
        WdgError::Io(io) => PyOSError::new_err(io.to_string()),
        other => WdgtcError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for wdgtc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense K-mode tensor of floats, mode 0 varying fastest in `values`.
#[pyclass(frozen, name = "DenseTensor", module = "pywdgtc")]
pub struct PyDenseTensor {
    inner: tensor::DenseTensor,
}

#[pymethods]
impl PyDenseTensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: tensor::DenseTensor::new(shape, values).py()? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: tensor::DenseTensor::zeros(&shape).py()? })
    }

    /// Tensor holding `value` at each listed multi-index and zero elsewhere,
    /// with the mask of listed cells.
    #[staticmethod]
    fn from_entries(shape: Vec<usize>, entries: Vec<(Vec<usize>, f64)>) -> PyResult<(Self, PyObservationMask)> {
        let (t, m) = tensor::tensor_from_entries(&shape, &entries).py()?;
        Ok((Self { inner: t }, PyObservationMask { inner: m }))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn ndim(&self) -> usize {
        self.inner.ndim()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn get(&self, index: Vec<usize>) -> PyResult<f64> {
        self.inner.get(&index).py()
    }

    fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    fn scaled(&self, factor: f64) -> Self {
        Self { inner: self.inner.scaled(factor) }
    }

    /// Copy with unobserved cells set to zero.
    fn masked(&self, mask: &PyObservationMask) -> PyResult<Self> {
        Ok(Self { inner: self.inner.masked(&mask.inner).py()? })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("DenseTensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(frozen, name = "ObservationMask", module = "pywdgtc")]
pub struct PyObservationMask {
    inner: tensor::ObservationMask,
}

#[pymethods]
impl PyObservationMask {
    #[new]
    fn new(shape: Vec<usize>, flags: Vec<bool>) -> PyResult<Self> {
        Ok(Self { inner: tensor::ObservationMask::new(shape, flags).py()? })
    }

    #[staticmethod]
    fn filled(shape: Vec<usize>, observed: bool) -> PyResult<Self> {
        Ok(Self { inner: tensor::ObservationMask::filled(&shape, observed).py()? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn flags(&self) -> Vec<bool> {
        self.inner.flags().to_vec()
    }

    fn observed_count(&self) -> usize {
        self.inner.observed_count()
    }

    fn is_observed(&self, index: Vec<usize>) -> PyResult<bool> {
        self.inner.is_observed(&index).py()
    }

    fn complement(&self) -> Self {
        Self { inner: self.inner.complement() }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ObservationMask(shape={:?}, observed={})", self.inner.shape(), self.inner.observed_count())
    }
}

/// Symmetric nonnegative weight matrix with a zero diagonal.
#[pyclass(frozen, name = "Adjacency", module = "pywdgtc")]
pub struct PyAdjacency {
    inner: graph::Adjacency,
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(WdgtcError::new_err("adjacency rows must form a square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[pymethods]
impl PyAdjacency {
    #[new]
    fn new(weights: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: graph::Adjacency::new(rows_to_matrix(&weights)?).py()? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(self.inner.weights())
    }

    /// Copy with weights below `threshold` removed.
    fn thresholded(&self, threshold: f64) -> Self {
        Self { inner: self.inner.thresholded(threshold) }
    }

    /// `D - A`.
    fn laplacian(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&graph::laplacian(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!("Adjacency(n={})", self.inner.n())
    }
}

/// Cosine-similarity graph over nonnegative feature vectors.
#[pyfunction]
fn poi_similarity(vectors: Vec<Vec<f64>>) -> PyResult<PyAdjacency> {
    Ok(PyAdjacency { inner: graph::poi_similarity(&vectors).py()? })
}

/// Binary graph joining entities at most `max_hops` edges apart.
#[pyfunction]
fn khop_binary(n: usize, edges: Vec<(usize, usize)>, max_hops: usize) -> PyResult<PyAdjacency> {
    Ok(PyAdjacency { inner: graph::khop_binary(n, &edges, max_hops).py()? })
}

#[pyclass(name = "SolverConfig", module = "pywdgtc")]
pub struct PySolverConfig {
    #[pyo3(get, set)]
    alpha: f64,
    #[pyo3(get, set)]
    beta: f64,
    #[pyo3(get, set)]
    graph_weights: Vec<f64>,
    #[pyo3(get, set)]
    initial_rank: usize,
    #[pyo3(get, set)]
    max_iter: usize,
    #[pyo3(get, set)]
    tol: f64,
    #[pyo3(get, set)]
    seed: u64,
    #[pyo3(get, set)]
    wdg_mode: usize,
}

impl PySolverConfig {
    fn to_core(&self) -> solver::SolverConfig {
        solver::SolverConfig {
            alpha: self.alpha,
            beta: self.beta,
            graph_weights: self.graph_weights.clone(),
            initial_rank: self.initial_rank,
            max_iter: self.max_iter,
            tol: self.tol,
            seed: self.seed,
            wdg_mode: self.wdg_mode,
        }
    }

    fn from_core(c: &solver::SolverConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            graph_weights: c.graph_weights.clone(),
            initial_rank: c.initial_rank,
            max_iter: c.max_iter,
            tol: c.tol,
            seed: c.seed,
            wdg_mode: c.wdg_mode,
        }
    }
}

#[pymethods]
impl PySolverConfig {
    #[new]
    #[pyo3(signature = (initial_rank, alpha=0.0, beta=0.0, graph_weights=Vec::new(), max_iter=200, tol=1e-6, seed=0, wdg_mode=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        initial_rank: usize,
        alpha: f64,
        beta: f64,
        graph_weights: Vec<f64>,
        max_iter: usize,
        tol: f64,
        seed: u64,
        wdg_mode: usize,
    ) -> Self {
        Self { alpha, beta, graph_weights, initial_rank, max_iter, tol, seed, wdg_mode }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.to_core())
    }
}

#[pyclass(frozen, name = "CompletionResult", module = "pywdgtc")]
pub struct PyCompletionResult {
    inner: solver::CompletionResult,
}

#[pymethods]
impl PyCompletionResult {
    #[getter]
    fn completed(&self) -> PyDenseTensor {
        PyDenseTensor { inner: self.inner.completed.clone() }
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.model.weights().to_vec()
    }

    /// One `I_k x rank` matrix per mode, as nested lists.
    #[getter]
    fn factors(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.model.factors().iter().map(matrix_to_rows).collect()
    }

    #[getter]
    fn final_rank(&self) -> usize {
        self.inner.final_rank
    }

    /// Objective at initialization followed by one value per sweep.
    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.objective_trace.clone()
    }

    #[getter]
    fn sweeps(&self) -> usize {
        self.inner.sweeps.len()
    }

    #[getter]
    fn termination(&self) -> &'static str {
        match self.inner.termination {
            solver::Termination::Converged => "converged",
            solver::Termination::MaxIterReached => "max_iter_reached",
            solver::Termination::RankCollapsed => "rank_collapsed",
        }
    }

    /// Tensor rebuilt from the fitted CP model alone.
    fn reconstruct(&self) -> PyResult<PyDenseTensor> {
        let shape = self.inner.completed.shape();
        Ok(PyDenseTensor { inner: tensor::cp_reconstruct(&self.inner.model, shape).py()? })
    }

    fn __repr__(&self) -> String {
        format!(
            "CompletionResult(final_rank={}, sweeps={}, termination={})",
            self.inner.final_rank,
            self.inner.sweeps.len(),
            self.termination()
        )
    }
}

fn penalties(graphs: &[PyRef<'_, PyAdjacency>]) -> PyResult<Vec<GraphPenalty>> {
    // The solver reads graph weights from the config.
    graphs.iter().map(|g| GraphPenalty::new(g.inner.clone(), 0.0).py()).collect()
}

/// Completes `x` on the cells `mask` leaves unobserved.
#[pyfunction]
#[pyo3(signature = (x, mask, config, graphs=Vec::new()))]
fn solve(
    py: Python<'_>,
    x: &PyDenseTensor,
    mask: &PyObservationMask,
    config: &PySolverConfig,
    graphs: Vec<PyRef<'_, PyAdjacency>>,
) -> PyResult<PyCompletionResult> {
    let penalties = penalties(&graphs)?;
    let cfg = config.to_core();
    let (x, mask) = (&x.inner, &mask.inner);
    let inner = py.detach(|| wdgtc::solve(x, mask, &cfg, &penalties)).py()?;
    Ok(PyCompletionResult { inner })
}

/// `sign(x) * max(|x| - t, 0)`.
#[pyfunction]
fn soft_threshold(x: f64, t: f64) -> PyResult<f64> {
    solver::soft_threshold(x, t).py()
}

#[pyclass(frozen, name = "Scenario", module = "pywdgtc")]
pub struct PyScenario {
    inner: synth::WdgScenario,
}

#[pymethods]
impl PyScenario {
    #[getter]
    fn truth(&self) -> PyDenseTensor {
        PyDenseTensor { inner: self.inner.truth.clone() }
    }

    fn noiseless(&self) -> PyDenseTensor {
        PyDenseTensor { inner: self.inner.noiseless() }
    }

    /// Block graph followed by its noisy weighted variant.
    #[getter]
    fn graphs(&self) -> Vec<PyAdjacency> {
        self.inner.graphs.iter().map(|a| PyAdjacency { inner: a.clone() }).collect()
    }

    #[getter]
    fn cluster_of(&self) -> Vec<usize> {
        self.inner.cluster_of.clone()
    }

    #[getter]
    fn planted_weights(&self) -> Vec<f64> {
        self.inner.planted_model.weights().to_vec()
    }

    #[getter]
    fn noise_sigma(&self) -> f64 {
        self.inner.noise_sigma
    }

    fn signal_rms(&self) -> f64 {
        self.inner.signal_rms()
    }
}

/// Synthetic clustered low-rank tensor with graphs over mode 0.
#[pyfunction]
#[pyo3(signature = (dims, clusters, rank_per_cluster, noise_sigma=0.0, seed=0))]
fn generate_wdg(
    dims: Vec<usize>,
    clusters: usize,
    rank_per_cluster: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<PyScenario> {
    Ok(PyScenario { inner: synth::generate_wdg(&dims, clusters, rank_per_cluster, noise_sigma, seed).py()? })
}

/// Each cell goes missing independently with probability `rate`.
#[pyfunction]
#[pyo3(signature = (shape, rate, seed=0))]
fn missing_random(shape: Vec<usize>, rate: f64, seed: u64) -> PyResult<PyObservationMask> {
    Ok(PyObservationMask { inner: synth::apply_missing(&shape, MissingPattern::Random { rate }, seed).py()? })
}

/// Cells at or past both indices on the last and second modes go missing.
#[pyfunction]
fn missing_tail(shape: Vec<usize>, last_from: usize, second_from: usize) -> PyResult<PyObservationMask> {
    let pattern = MissingPattern::TailBlock { last_from, second_from };
    Ok(PyObservationMask { inner: synth::apply_missing(&shape, pattern, 0).py()? })
}

/// MSE, MAPE (percent), RES and optionally per-slice RES as a dict.
#[pyfunction]
#[pyo3(signature = (pred, truth, mask, slice_mode=None))]
fn score<'py>(
    py: Python<'py>,
    pred: &PyDenseTensor,
    truth: &PyDenseTensor,
    mask: &PyObservationMask,
    slice_mode: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::score(&pred.inner, &truth.inner, &mask.inner, slice_mode).py()?;
    let d = PyDict::new(py);
    d.set_item("mse", r.mse)?;
    d.set_item("mape", r.mape)?;
    d.set_item("res", r.res)?;
    d.set_item("eval_cell_count", r.eval_cell_count)?;
    d.set_item("mape_cell_count", r.mape_cell_count)?;
    if let Some(slices) = r.per_slice {
        let rows = slices
            .iter()
            .map(|s| {
                let row = PyDict::new(py);
                row.set_item("index", s.index)?;
                row.set_item("res", s.res)?;
                row.set_item("sq_residual", s.sq_residual)?;
                row.set_item("cells", s.cells)?;
                Ok(row)
            })
            .collect::<PyResult<Vec<_>>>()?;
        d.set_item("per_slice", rows)?;
    }
    Ok(d)
}

/// Searches coefficient grids, training on `train` and scoring on `val`.
///
/// Returns `(best_config, table)` where each table row is a dict.
#[pyfunction]
#[pyo3(signature = (x, train, val, truth, base, alpha, beta, graph_weights=Vec::new(), graphs=Vec::new(), per_beta_seed=None, threads=1))]
#[allow(clippy::too_many_arguments)]
fn grid_search<'py>(
    py: Python<'py>,
    x: &PyDenseTensor,
    train: &PyObservationMask,
    val: &PyObservationMask,
    truth: &PyDenseTensor,
    base: &PySolverConfig,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    graph_weights: Vec<Vec<f64>>,
    graphs: Vec<PyRef<'py, PyAdjacency>>,
    per_beta_seed: Option<u64>,
    threads: usize,
) -> PyResult<(PySolverConfig, Vec<Bound<'py, PyDict>>)> {
    let penalties = penalties(&graphs)?;
    let grid = ParamGrid { alpha, beta, graph_weights };
    let strategy = match per_beta_seed {
        Some(seed) => SearchStrategy::PerBeta { seed },
        None => SearchStrategy::Exhaustive,
    };
    let base = base.to_core();
    let (x, train, val, truth) = (&x.inner, &train.inner, &val.inner, &truth.inner);
    let out = py
        .detach(|| metrics::grid_search(x, train, val, truth, &penalties, &grid, strategy, &base, threads))
        .py()?;
    let table = out
        .table
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("alpha", row.alpha)?;
            d.set_item("beta", row.beta)?;
            d.set_item("graph_weights", row.graph_weights.clone())?;
            d.set_item("mse", row.mse)?;
            d.set_item("mape", row.mape)?;
            d.set_item("res", row.res)?;
            d.set_item("final_rank", row.final_rank)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PySolverConfig::from_core(&out.best), table))
}

/// Reads a tensor file; returns the tensor and the mask of listed cells.
#[pyfunction]
fn read_tensor(path: std::path::PathBuf) -> PyResult<(PyDenseTensor, PyObservationMask)> {
    let file = std::fs::File::open(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
    let (t, m) = io::read_tensor(std::io::BufReader::new(file)).py()?;
    Ok((PyDenseTensor { inner: t }, PyObservationMask { inner: m }))
}

/// Writes `t`, listing only the cells `mask` marks observed if given.
#[pyfunction]
#[pyo3(signature = (path, t, mask=None))]
fn write_tensor(path: std::path::PathBuf, t: &PyDenseTensor, mask: Option<&PyObservationMask>) -> PyResult<()> {
    let text = io::tensor_to_string(&t.inner, mask.map(|m| &m.inner)).py()?;
    std::fs::write(&path, text).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
}

/// Weights and factor matrices rebuilt into a dense tensor.
#[pyfunction]
fn cp_reconstruct(weights: Vec<f64>, factors: Vec<Vec<Vec<f64>>>) -> PyResult<PyDenseTensor> {
    let rank = weights.len();
    let mats = factors
        .iter()
        .map(|rows| {
            if rows.iter().any(|r| r.len() != rank) {
                return Err(WdgtcError::new_err("every factor row needs one entry per weight"));
            }
            Ok(DMatrix::from_fn(rows.len(), rank, |i, r| rows[i][r]))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let model = CpModel::new(weights, mats).py()?;
    let shape = model.mode_sizes();
    Ok(PyDenseTensor { inner: tensor::cp_reconstruct(&model, &shape).py()? })
}

#[pymodule]
fn pywdgtc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WdgtcError", m.py().get_type::<WdgtcError>())?;
    m.add_class::<PyDenseTensor>()?;
    m.add_class::<PyObservationMask>()?;
    m.add_class::<PyAdjacency>()?;
    m.add_class::<PySolverConfig>()?;
    m.add_class::<PyCompletionResult>()?;
    m.add_class::<PyScenario>()?;
    m.add_function(wrap_pyfunction!(poi_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(khop_binary, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(generate_wdg, m)?)?;
    m.add_function(wrap_pyfunction!(missing_random, m)?)?;
    m.add_function(wrap_pyfunction!(missing_tail, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(cp_reconstruct, m)?)?;
    Ok(())
}
