//! Block coordinate descent for sparse, graph-regularized CP completion.
//!
//! The unknowns are split into one block per CP component
//! `{lambda_r, u_r^(1), ..., u_r^(K)}` plus the completed tensor itself.
//! Each block has a closed-form update:
//!
//! * the weakly-dependent mode vector solves
//!   `(lambda_r^2 I + sum_i gamma_i L_i) w = lambda_r * b`, is soft-thresholded
//!   by `alpha` and renormalized;
//! * every other mode vector is the contraction of the residual divided by
//!   `lambda_r`, renormalized;
//! * `lambda_r` is the soft-thresholded full contraction of the residual;
//! * the completion keeps observed cells and fills the rest from the model.
//!
//! Components whose weight is shrunk to zero are pruned, so `beta` selects the
//! rank.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result, WdgError};
use crate::graph::GraphPenalty;
use crate::tensor::{
    contract_all, contract_all_but, cp_reconstruct, outer_product, project_replace,
    sq_frobenius_diff, CpModel, DenseTensor, ObservationMask,
};

/// Weights below this magnitude after an update are treated as zero.
const DEGENERATE_WEIGHT: f64 = 1e-14;
/// Contractions with a smaller norm cannot be normalized.
const DEGENERATE_NORM: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// L1 weight on the weakly-dependent factor matrix.
    pub alpha: f64,
    /// L1 weight on the CP weights; controls the rank.
    pub beta: f64,
    /// One Laplacian coefficient per graph, in the order graphs are supplied.
    pub graph_weights: Vec<f64>,
    pub initial_rank: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Zero-based index of the weakly-dependent mode.
    pub wdg_mode: usize,
}

impl SolverConfig {
    pub fn new(initial_rank: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            graph_weights: Vec::new(),
            initial_rank,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            wdg_mode: 0,
        }
    }

    /// Copies the coefficients carried by `graphs` into `graph_weights`.
    pub fn with_graph_weights_from(mut self, graphs: &[GraphPenalty]) -> Self {
        self.graph_weights = graphs.iter().map(GraphPenalty::weight).collect();
        self
    }

    pub fn validate(&self, n_graphs: usize) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                input_err(format!("{name} must be finite and nonnegative, got {v}"))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("beta", self.beta)?;
        for (i, &g) in self.graph_weights.iter().enumerate() {
            nonneg(&format!("graph weight {i}"), g)?;
        }
        if self.graph_weights.len() != n_graphs {
            return input_err(format!(
                "{} graph weights given for {n_graphs} graphs",
                self.graph_weights.len()
            ));
        }
        if self.initial_rank == 0 {
            return input_err("initial rank must be at least 1");
        }
        if self.max_iter == 0 {
            return input_err("max_iter must be at least 1");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return input_err(format!("tol must be positive, got {}", self.tol));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterReached,
    RankCollapsed,
}

/// Bookkeeping for one sweep over all components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    /// Unhalved squared fit residual just before the end-of-sweep completion refresh.
    pub loss_before_refresh: f64,
    /// The same quantity right after it.
    pub loss_after_refresh: f64,
    /// Rank after pruning.
    pub rank: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub completed: DenseTensor,
    pub model: CpModel,
    pub final_rank: usize,
    /// Penalized objective at initialization followed by one value per sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps: Vec<SweepStats>,
    pub termination: Termination,
}

/// `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return input_err(format!("threshold must be nonnegative, got {t}"));
    }
    Ok(shrink(x, t))
}

pub fn soft_threshold_vec(x: &[f64], t: f64) -> Result<Vec<f64>> {
    if t.is_nan() || t < 0.0 {
        return input_err(format!("threshold must be nonnegative, got {t}"));
    }
    Ok(x.iter().map(|&v| shrink(v, t)).collect())
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    let mag = x.abs() - t;
    if mag > 0.0 {
        mag.copysign(x)
    } else {
        0.0
    }
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_nan() || norm < DEGENERATE_NORM {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// `y - sum_{q != r} lambda_q u_q^(1) ∘ ... ∘ u_q^(K)`.
pub fn residual_tensor(y: &DenseTensor, m: &CpModel, r: usize) -> Result<DenseTensor> {
    if r >= m.rank() {
        return input_err(format!("component {r} out of range for rank {}", m.rank()));
    }
    if m.mode_sizes() != y.shape() {
        return shape_err(format!("model mode sizes {:?} vs tensor {:?}", m.mode_sizes(), y.shape()));
    }
    let mut values = y.values().to_vec();
    for q in (0..m.rank()).filter(|&q| q != r && m.weights()[q] != 0.0) {
        m.accumulate_component(q, -1.0, &mut values);
    }
    DenseTensor::new(y.shape().to_vec(), values)
}

/// Closed-form update of the weakly-dependent mode vector.
///
/// `others` holds the current vectors of every other mode, in mode order.
/// Returns `None` when soft-thresholding zeroes the whole vector, meaning
/// the component should be pruned.
pub fn update_u1(
    y_r: &DenseTensor,
    lambda_r: f64,
    others: &[&[f64]],
    mode: usize,
    alpha: f64,
    graphs: &[GraphPenalty],
    graph_weights: &[f64],
) -> Result<Option<Vec<f64>>> {
    if graphs.len() != graph_weights.len() {
        return input_err(format!("{} graph weights for {} graphs", graph_weights.len(), graphs.len()));
    }
    let n = *y_r
        .shape()
        .get(mode)
        .ok_or_else(|| WdgError::Input(format!("mode {mode} out of range")))?;
    let contraction = contract_all_but(y_r, others, mode)?;

    let mut system = DMatrix::<f64>::identity(n, n) * (lambda_r * lambda_r);
    for (g, &w) in graphs.iter().zip(graph_weights) {
        if g.n() != n {
            return shape_err(format!("graph over {} entities, mode {mode} has {n}", g.n()));
        }
        if w != 0.0 {
            system += g.laplacian() * w;
        }
    }
    let rhs = DVector::from_iterator(n, contraction.iter().map(|c| lambda_r * c));
    let chol = system.cholesky().ok_or_else(|| {
        WdgError::Precondition(format!(
            "system matrix for mode {mode} is not positive definite (lambda_r = {lambda_r})"
        ))
    })?;
    let solved = chol.solve(&rhs);
    let shrunk = soft_threshold_vec(solved.as_slice(), alpha)?;
    if shrunk.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    Ok(normalized(shrunk))
}

/// Closed-form update of a non-weakly-dependent mode vector.
pub fn update_uk(y_r: &DenseTensor, lambda_r: f64, others: &[&[f64]], k: usize) -> Result<Vec<f64>> {
    if lambda_r == 0.0 {
        return Err(WdgError::Precondition("lambda_r must be nonzero".into()));
    }
    let w: Vec<f64> = contract_all_but(y_r, others, k)?
        .into_iter()
        .map(|c| c / lambda_r)
        .collect();
    normalized(w).ok_or_else(|| WdgError::Degenerate(format!("mode {k} contraction vanished")))
}

/// Soft-thresholded full contraction of the residual with the component.
pub fn update_lambda(y_r: &DenseTensor, all_vectors: &[&[f64]], beta: f64) -> Result<f64> {
    soft_threshold(contract_all(y_r, all_vectors)?, beta)
}

/// Observed cells from `x`, every other cell from the CP model.
pub fn update_completion(
    y: &DenseTensor,
    x: &DenseTensor,
    mask: &ObservationMask,
    m: &CpModel,
) -> Result<DenseTensor> {
    if y.shape() != x.shape() {
        return shape_err(format!("y {:?} vs x {:?}", y.shape(), x.shape()));
    }
    let recon = cp_reconstruct(m, y.shape())?;
    project_replace(&recon, mask, x)
}

fn check_graphs(shape: &[usize], mode: usize, graphs: &[GraphPenalty]) -> Result<()> {
    let n = *shape
        .get(mode)
        .ok_or_else(|| WdgError::Input(format!("weakly-dependent mode {mode} out of range")))?;
    for (i, g) in graphs.iter().enumerate() {
        if g.n() != n {
            return shape_err(format!("graph {i} has {} entities, mode {mode} has {n}", g.n()));
        }
    }
    Ok(())
}

fn laplacian_term(m: &CpModel, mode: usize, graphs: &[GraphPenalty], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (g, &w) in graphs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let trace: f64 = (0..m.rank()).map(|r| g.energy(m.column(mode, r))).sum();
        total += 0.5 * w * trace;
    }
    total
}

/// Penalized objective: half squared fit residual, L1 on the weakly-dependent
/// factor and on the weights, and half-weighted Laplacian traces.
pub fn objective(y: &DenseTensor, m: &CpModel, cfg: &SolverConfig, graphs: &[GraphPenalty]) -> Result<f64> {
    check_graphs(y.shape(), cfg.wdg_mode, graphs)?;
    if cfg.graph_weights.len() != graphs.len() {
        return input_err("graph weight count does not match graph count");
    }
    let recon = cp_reconstruct(m, y.shape())?;
    let loss = 0.5 * sq_frobenius_diff(y, &recon, None)?;
    let l1_factor: f64 = m.factors()[cfg.wdg_mode].iter().map(|v| v.abs()).sum();
    let l1_weights: f64 = m.weights().iter().map(|v| v.abs()).sum();
    Ok(loss + cfg.alpha * l1_factor + cfg.beta * l1_weights + laplacian_term(m, cfg.wdg_mode, graphs, &cfg.graph_weights))
}

/// Value of the smooth part of the objective (fit residual plus Laplacian
/// traces), treating weights and factor columns as free variables.
pub fn smooth_objective(y: &DenseTensor, m: &CpModel, cfg: &SolverConfig, graphs: &[GraphPenalty]) -> Result<f64> {
    check_graphs(y.shape(), cfg.wdg_mode, graphs)?;
    let recon = cp_reconstruct(m, y.shape())?;
    Ok(0.5 * sq_frobenius_diff(y, &recon, None)? + laplacian_term(m, cfg.wdg_mode, graphs, &cfg.graph_weights))
}

/// Analytic gradient of [`smooth_objective`] with respect to the weights and
/// every factor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGradient {
    pub weights: Vec<f64>,
    pub factors: Vec<DMatrix<f64>>,
}

pub fn smooth_gradient(
    y: &DenseTensor,
    m: &CpModel,
    cfg: &SolverConfig,
    graphs: &[GraphPenalty],
) -> Result<SmoothGradient> {
    check_graphs(y.shape(), cfg.wdg_mode, graphs)?;
    let recon = cp_reconstruct(m, y.shape())?;
    let resid_values: Vec<f64> = y.values().iter().zip(recon.values()).map(|(a, b)| a - b).collect();
    let resid = DenseTensor::new(y.shape().to_vec(), resid_values)?;

    let ndim = m.ndim();
    let mut weights = Vec::with_capacity(m.rank());
    let mut factors: Vec<DMatrix<f64>> = m.factors().iter().map(|f| DMatrix::zeros(f.nrows(), f.ncols())).collect();
    for r in 0..m.rank() {
        let cols = m.component(r);
        weights.push(-contract_all(&resid, &cols)?);
        for k in 0..ndim {
            let others: Vec<&[f64]> = (0..ndim).filter(|&j| j != k).map(|j| cols[j]).collect();
            let mut g: Vec<f64> = contract_all_but(&resid, &others, k)?
                .into_iter()
                .map(|c| -m.weights()[r] * c)
                .collect();
            if k == cfg.wdg_mode {
                for (graph, &w) in graphs.iter().zip(&cfg.graph_weights) {
                    let lu = graph.laplacian() * DVector::from_column_slice(cols[k]);
                    g.iter_mut().zip(lu.iter()).for_each(|(gi, li)| *gi += w * li);
                }
            }
            factors[k].column_mut(r).copy_from_slice(&g);
        }
    }
    Ok(SmoothGradient { weights, factors })
}

fn random_model(shape: &[usize], rank: usize, seed: u64) -> CpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = shape
        .iter()
        .map(|&n| {
            let mut f = DMatrix::<f64>::zeros(n, rank);
            for r in 0..rank {
                loop {
                    let col: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    if let Some(unit) = normalized(col) {
                        f.column_mut(r).copy_from_slice(&unit);
                        break;
                    }
                }
            }
            f
        })
        .collect();
    CpModel::new(vec![0.0; rank], factors).expect("random factors are consistent by construction")
}

/// Working state of one solve: the completion, the model and its full
/// reconstruction kept in sync.
struct Workspace<'a> {
    x: &'a DenseTensor,
    mask: &'a ObservationMask,
    y: DenseTensor,
    model: CpModel,
    recon: Vec<f64>,
}

impl Workspace<'_> {
    fn refresh_completion(&mut self) {
        let values = self
            .recon
            .iter()
            .zip(self.x.values())
            .zip(self.mask.flags())
            .map(|((&r, &x), &m)| if m { x } else { r })
            .collect();
        self.y = DenseTensor::from_parts_unchecked(self.y.shape().to_vec(), values);
    }

    fn rebuild_recon(&mut self) {
        self.recon = cp_reconstruct(&self.model, self.y.shape())
            .expect("model tracks tensor shape")
            .into_values();
    }

    fn fit_loss(&self) -> f64 {
        self.y.values().iter().zip(&self.recon).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Residual for component `r`: `y - recon + lambda_r * rank_one_r`.
    fn residual(&self, r: usize) -> DenseTensor {
        let mut values: Vec<f64> = self.y.values().iter().zip(&self.recon).map(|(y, c)| y - c).collect();
        if self.model.weights()[r] != 0.0 {
            self.model.accumulate_component(r, 1.0, &mut values);
        }
        DenseTensor::from_parts_unchecked(self.y.shape().to_vec(), values)
    }

    /// Swaps component `r`'s contribution in the running reconstruction.
    fn replace_component(&mut self, r: usize, weight: f64, columns: &[Vec<f64>]) {
        if self.model.weights()[r] != 0.0 {
            self.model.accumulate_component(r, -1.0, &mut self.recon);
        }
        for (k, col) in columns.iter().enumerate() {
            self.model.set_column(k, r, col);
        }
        self.model.weights_mut()[r] = weight;
        if weight != 0.0 {
            let cols: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
            let term = outer_product(weight, &cols);
            self.recon.iter_mut().zip(&term).for_each(|(c, t)| *c += t);
        }
    }

    fn prune_component(&mut self, r: usize) {
        if self.model.weights()[r] != 0.0 {
            self.model.accumulate_component(r, -1.0, &mut self.recon);
        }
        self.model.weights_mut()[r] = 0.0;
    }
}

/// Runs the update sequence for one component. Returns the new weight and
/// columns, or `None` when the component is pruned.
fn update_block(
    ws: &Workspace<'_>,
    r: usize,
    cfg: &SolverConfig,
    graphs: &[GraphPenalty],
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let ndim = ws.model.ndim();
    let mode = cfg.wdg_mode;
    let lambda = ws.model.weights()[r];
    let y_r = ws.residual(r);
    let mut cols: Vec<Vec<f64>> = ws.model.component(r).into_iter().map(<[f64]>::to_vec).collect();

    let others = |cols: &[Vec<f64>], k: usize| -> Vec<Vec<f64>> {
        (0..ndim).filter(|&j| j != k).map(|j| cols[j].clone()).collect()
    };

    let o = others(&cols, mode);
    let o_refs: Vec<&[f64]> = o.iter().map(Vec::as_slice).collect();
    match update_u1(&y_r, lambda, &o_refs, mode, cfg.alpha, graphs, &cfg.graph_weights)? {
        Some(u) => cols[mode] = u,
        None => return Ok(None),
    }

    for k in (0..ndim).filter(|&k| k != mode) {
        let o = others(&cols, k);
        let o_refs: Vec<&[f64]> = o.iter().map(Vec::as_slice).collect();
        match update_uk(&y_r, lambda, &o_refs, k) {
            Ok(u) => cols[k] = u,
            Err(WdgError::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }

    let all: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let new_lambda = update_lambda(&y_r, &all, cfg.beta)?;
    if new_lambda.abs() < DEGENERATE_WEIGHT {
        return Ok(None);
    }
    Ok(Some((new_lambda, cols)))
}

/// Completes `x` on the unobserved cells of `mask`.
///
/// Graph coefficients are read from `cfg.graph_weights`; the weight stored in
/// each [`GraphPenalty`] is not consulted here.
pub fn solve(
    x: &DenseTensor,
    mask: &ObservationMask,
    cfg: &SolverConfig,
    graphs: &[GraphPenalty],
) -> Result<CompletionResult> {
    cfg.validate(graphs.len())?;
    if x.shape() != mask.shape() {
        return shape_err(format!("tensor {:?} vs mask {:?}", x.shape(), mask.shape()));
    }
    if mask.observed_count() == 0 {
        return input_err("mask has no observed cells");
    }
    if x.values().iter().any(|v| !v.is_finite()) {
        return input_err("input tensor has non-finite values");
    }
    check_graphs(x.shape(), cfg.wdg_mode, graphs)?;

    let x = x.masked(mask)?;
    let shape = x.shape().to_vec();

    let mut model = random_model(&shape, cfg.initial_rank, cfg.seed);
    for r in 0..model.rank() {
        let w = contract_all(&x, &model.component(r))?;
        model.weights_mut()[r] = if w.abs() < DEGENERATE_WEIGHT { 0.0 } else { w };
    }
    model.prune_zero_weights();

    let mut ws = Workspace {
        x: &x,
        mask,
        y: x.clone(),
        model,
        recon: Vec::new(),
    };
    ws.rebuild_recon();
    ws.refresh_completion();

    let mut trace = vec![objective(&ws.y, &ws.model, cfg, graphs)?];
    let mut sweeps = Vec::new();
    let mut increases = 0usize;
    let mut termination = if ws.model.rank() == 0 {
        Termination::RankCollapsed
    } else {
        Termination::MaxIterReached
    };

    if termination != Termination::RankCollapsed {
        for sweep in 0..cfg.max_iter {
            for r in 0..ws.model.rank() {
                if ws.model.weights()[r] == 0.0 {
                    continue;
                }
                match update_block(&ws, r, cfg, graphs)? {
                    Some((lambda, cols)) => ws.replace_component(r, lambda, &cols),
                    None => ws.prune_component(r),
                }
                ws.refresh_completion();
            }

            ws.model.prune_zero_weights();
            ws.rebuild_recon();
            let loss_before_refresh = ws.fit_loss();
            ws.refresh_completion();
            let loss_after_refresh = ws.fit_loss();

            let obj = objective(&ws.y, &ws.model, cfg, graphs)?;
            let prev = *trace.last().expect("trace starts non-empty");
            trace.push(obj);
            sweeps.push(SweepStats {
                loss_before_refresh,
                loss_after_refresh,
                rank: ws.model.rank(),
                objective: obj,
            });

            if ws.model.rank() == 0 {
                termination = Termination::RankCollapsed;
                break;
            }
            let drop = prev - obj;
            if drop < -1e-9 * (1.0 + prev.abs()) {
                increases += 1;
                if increases == 1 {
                    log::warn!("objective increased in sweep {}: {prev} -> {obj}", sweep + 1);
                } else {
                    log::debug!("objective increased in sweep {}: {prev} -> {obj}", sweep + 1);
                }
            } else if drop < cfg.tol {
                termination = Termination::Converged;
                break;
            }
        }
    }

    if increases > 1 {
        log::warn!("objective increased in {increases} of {} sweeps", sweeps.len());
    }
    let final_rank = ws.model.nonzero_weights();
    Ok(CompletionResult {
        completed: ws.y,
        model: ws.model,
        final_rank,
        objective_trace: trace,
        sweeps,
        termination,
    })
}
