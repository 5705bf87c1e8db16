//! Held-out scoring and coefficient search.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Result, WdgError};
use crate::graph::GraphPenalty;
use crate::solver::{solve, SolverConfig};
use crate::tensor::{multi_index, DenseTensor, ObservationMask};

/// Residual of one slice along the reporting mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub index: usize,
    /// Relative residual; NaN when the slice has no evaluated cells.
    pub res: f64,
    pub sq_residual: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    /// Mean absolute percentage error, in percent.
    pub mape: f64,
    pub res: f64,
    pub per_slice: Option<Vec<SliceScore>>,
    pub eval_cell_count: usize,
    /// Cells with nonzero truth that entered the MAPE mean.
    pub mape_cell_count: usize,
}

fn relative(sq_residual: f64, sq_truth: f64) -> f64 {
    if sq_truth > 0.0 {
        (sq_residual / sq_truth).sqrt()
    } else if sq_residual == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

struct Partial {
    mse: f64,
    mape: Option<f64>,
    res: f64,
    cells: usize,
    mape_cells: usize,
}

fn score_partial(pred: &DenseTensor, truth: &DenseTensor, mask: &ObservationMask) -> Result<Partial> {
    if pred.shape() != truth.shape() || truth.shape() != mask.shape() {
        return shape_err(format!(
            "pred {:?}, truth {:?}, mask {:?}",
            pred.shape(),
            truth.shape(),
            mask.shape()
        ));
    }
    let (mut sq, mut sq_truth, mut ape) = (0.0, 0.0, 0.0);
    let (mut cells, mut mape_cells) = (0usize, 0usize);
    for ((&p, &t), _) in pred
        .values()
        .iter()
        .zip(truth.values())
        .zip(mask.flags())
        .filter(|(_, &m)| m)
    {
        let d = p - t;
        sq += d * d;
        sq_truth += t * t;
        cells += 1;
        if t != 0.0 {
            ape += (d / t).abs();
            mape_cells += 1;
        }
    }
    if cells == 0 {
        return input_err("evaluation mask selects no cells");
    }
    Ok(Partial {
        mse: sq / cells as f64,
        mape: (mape_cells > 0).then(|| 100.0 * ape / mape_cells as f64),
        res: relative(sq, sq_truth),
        cells,
        mape_cells,
    })
}

/// Scores `pred` against `truth` on the cells selected by `eval_mask`.
///
/// With `slice_mode` set, the relative residual is also reported for every
/// index of that mode.
pub fn score(
    pred: &DenseTensor,
    truth: &DenseTensor,
    eval_mask: &ObservationMask,
    slice_mode: Option<usize>,
) -> Result<MetricReport> {
    let p = score_partial(pred, truth, eval_mask)?;
    let mape = p.mape.ok_or(WdgError::MapeUndefined)?;
    let per_slice = slice_mode.map(|mode| per_slice_res(pred, truth, eval_mask, mode)).transpose()?;
    Ok(MetricReport {
        mse: p.mse,
        mape,
        res: p.res,
        per_slice,
        eval_cell_count: p.cells,
        mape_cell_count: p.mape_cells,
    })
}

fn per_slice_res(
    pred: &DenseTensor,
    truth: &DenseTensor,
    mask: &ObservationMask,
    mode: usize,
) -> Result<Vec<SliceScore>> {
    let shape = truth.shape();
    if mode >= shape.len() {
        return input_err(format!("slice mode {mode} out of range for {}-mode tensor", shape.len()));
    }
    let n = shape[mode];
    let mut sq = vec![0.0; n];
    let mut sq_truth = vec![0.0; n];
    let mut cells = vec![0usize; n];
    let mut idx = vec![0; shape.len()];
    for (offset, &m) in mask.flags().iter().enumerate() {
        if !m {
            continue;
        }
        multi_index(shape, offset, &mut idx);
        let s = idx[mode];
        let t = truth.values()[offset];
        let d = pred.values()[offset] - t;
        sq[s] += d * d;
        sq_truth[s] += t * t;
        cells[s] += 1;
    }
    Ok((0..n)
        .map(|s| SliceScore {
            index: s,
            res: if cells[s] == 0 { f64::NAN } else { relative(sq[s], sq_truth[s]) },
            sq_residual: sq[s],
            cells: cells[s],
        })
        .collect())
}

/// Candidate values for each coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// One list per graph.
    pub graph_weights: Vec<Vec<f64>>,
}

impl ParamGrid {
    fn validate(&self, n_graphs: usize) -> Result<()> {
        if self.graph_weights.len() != n_graphs {
            return input_err(format!(
                "{} graph weight grids for {n_graphs} graphs",
                self.graph_weights.len()
            ));
        }
        let all = std::iter::once(&self.alpha)
            .chain(std::iter::once(&self.beta))
            .chain(self.graph_weights.iter());
        for g in all {
            if g.is_empty() {
                return input_err("every grid needs at least one value");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Every combination of grid values.
    Exhaustive,
    /// One row per beta value; the other coefficients are drawn uniformly
    /// from their grids with the given seed.
    PerBeta { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub graph_weights: Vec<f64>,
    pub mse: f64,
    /// NaN when every validation truth value is zero.
    pub mape: f64,
    pub res: f64,
    pub final_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchOutcome {
    pub best: SolverConfig,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

fn candidate_points(grid: &ParamGrid, strategy: SearchStrategy) -> Vec<(f64, f64, Vec<f64>)> {
    match strategy {
        SearchStrategy::Exhaustive => {
            let mut graph_combos: Vec<Vec<f64>> = vec![Vec::new()];
            for values in &grid.graph_weights {
                graph_combos = graph_combos
                    .into_iter()
                    .flat_map(|prefix| {
                        values.iter().map(move |&v| {
                            let mut next = prefix.clone();
                            next.push(v);
                            next
                        })
                    })
                    .collect();
            }
            let mut out = Vec::new();
            for &beta in &grid.beta {
                for &alpha in &grid.alpha {
                    for gw in &graph_combos {
                        out.push((alpha, beta, gw.clone()));
                    }
                }
            }
            out
        }
        SearchStrategy::PerBeta { seed } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pick = |v: &[f64]| v[rng.random_range(0..v.len())];
            grid.beta
                .iter()
                .map(|&beta| {
                    let alpha = pick(&grid.alpha);
                    let gw = grid.graph_weights.iter().map(|g| pick(g)).collect();
                    (alpha, beta, gw)
                })
                .collect()
        }
    }
}

/// Trains on `mask_train` for every grid point, scores on `mask_val` against
/// `truth_val`, and returns the point with the lowest validation MSE.
///
/// Points run on up to `threads` worker threads; the table is always in grid
/// order and ties go to the earliest point.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    x: &DenseTensor,
    mask_train: &ObservationMask,
    mask_val: &ObservationMask,
    truth_val: &DenseTensor,
    graphs: &[GraphPenalty],
    grid: &ParamGrid,
    strategy: SearchStrategy,
    base_cfg: &SolverConfig,
    threads: usize,
) -> Result<GridSearchOutcome> {
    grid.validate(graphs.len())?;
    if mask_train.overlaps(mask_val)? {
        return input_err("training and validation masks overlap");
    }
    let points = candidate_points(grid, strategy);
    let configs: Vec<SolverConfig> = points
        .into_iter()
        .map(|(alpha, beta, graph_weights)| SolverConfig {
            alpha,
            beta,
            graph_weights,
            ..base_cfg.clone()
        })
        .collect();

    let run = |cfg: &SolverConfig| -> Result<GridRow> {
        let result = solve(x, mask_train, cfg, graphs)?;
        let p = score_partial(&result.completed, truth_val, mask_val)?;
        Ok(GridRow {
            alpha: cfg.alpha,
            beta: cfg.beta,
            graph_weights: cfg.graph_weights.clone(),
            mse: p.mse,
            mape: p.mape.unwrap_or(f64::NAN),
            res: p.res,
            final_rank: result.final_rank,
        })
    };

    let slots: Vec<Mutex<Option<Result<GridRow>>>> = configs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, configs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= configs.len() {
                    break;
                }
                let row = run(&configs[i]);
                *slots[i].lock().expect("slot lock") = Some(row);
            });
        }
    });

    let table = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot is filled"))
        .collect::<Result<Vec<_>>>()?;
    let best_index = table
        .iter()
        .enumerate()
        .fold(0, |best, (i, row)| if row.mse < table[best].mse { i } else { best });
    Ok(GridSearchOutcome {
        best: configs[best_index].clone(),
        best_index,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> DenseTensor {
        DenseTensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let truth = t(&[1.0, -2.0, 3.0]);
        let mask = ObservationMask::filled(&[3, 1], true).unwrap();
        let r = score(&truth, &truth, &mask, Some(0)).unwrap();
        assert_eq!((r.mse, r.mape, r.res), (0.0, 0.0, 0.0));
        assert_eq!(r.per_slice.unwrap().len(), 3);
    }

    #[test]
    fn two_cell_offsets() {
        let truth = t(&[10.0, 20.0, 7.0]);
        let pred = t(&[11.0, 21.0, 0.0]);
        let mask = ObservationMask::new(vec![3, 1], vec![true, true, false]).unwrap();
        let r = score(&pred, &truth, &mask, None).unwrap();
        assert!((r.mse - 1.0).abs() < 1e-15);
        assert!((r.mape - 7.5).abs() < 1e-12);
        assert!((r.res - (2.0f64 / 500.0).sqrt()).abs() < 1e-15);
        assert_eq!(r.eval_cell_count, 2);
    }

    #[test]
    fn mape_guard_and_empty_mask() {
        let truth = t(&[0.0, 5.0]);
        let pred = t(&[1.0, 5.0]);
        let first = ObservationMask::new(vec![2, 1], vec![true, false]).unwrap();
        assert!(matches!(score(&pred, &truth, &first, None), Err(WdgError::MapeUndefined)));
        let none = ObservationMask::filled(&[2, 1], false).unwrap();
        assert!(matches!(score(&pred, &truth, &none, None), Err(WdgError::Input(_))));
        let both = ObservationMask::filled(&[2, 1], true).unwrap();
        let r = score(&pred, &truth, &both, None).unwrap();
        assert_eq!(r.mape_cell_count, 1);
        assert_eq!(r.mape, 0.0);
    }

    #[test]
    fn exhaustive_and_per_beta_points() {
        let grid = ParamGrid {
            alpha: vec![0.0, 1.0],
            beta: vec![10.0, 20.0, 30.0],
            graph_weights: vec![vec![0.0, 5.0], vec![1.0]],
        };
        assert_eq!(candidate_points(&grid, SearchStrategy::Exhaustive).len(), 12);
        let rows = candidate_points(&grid, SearchStrategy::PerBeta { seed: 3 });
        assert_eq!(rows.iter().map(|r| r.1).collect::<Vec<_>>(), vec![10.0, 20.0, 30.0]);
        assert_eq!(rows, candidate_points(&grid, SearchStrategy::PerBeta { seed: 3 }));
    }
}
