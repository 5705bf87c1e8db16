use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdgtc::graph::{khop_binary, GraphPenalty};
use wdgtc::solver::{
    objective, residual_tensor, smooth_gradient, smooth_objective, soft_threshold, update_completion,
    update_lambda,
};
use wdgtc::synth::{apply_missing, generate_wdg, MissingPattern};
use wdgtc::tensor::{cp_reconstruct, sq_frobenius_diff, CpModel, DenseTensor, ObservationMask};
use wdgtc::{solve, SolverConfig, Termination};

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn random_model(rng: &mut ChaCha8Rng, shape: &[usize], rank: usize) -> CpModel {
    let weights = (0..rank).map(|_| rng.random_range(0.5..4.0)).collect();
    let factors = shape
        .iter()
        .map(|&n| {
            let cols: Vec<Vec<f64>> = (0..rank).map(|_| random_unit(rng, n)).collect();
            DMatrix::from_fn(n, rank, |i, r| cols[r][i])
        })
        .collect();
    CpModel::new(weights, factors).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ring_graph(n: usize, weight: f64) -> GraphPenalty {
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    GraphPenalty::new(khop_binary(n, &edges, 1).unwrap(), weight).unwrap()
}

#[test]
fn prox_matches_grid_argmin() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let x: f64 = rng.random_range(-3.0..3.0);
        let t: f64 = rng.random_range(0.0..2.0);
        let steps = 60_000;
        let (mut best_z, mut best_v) = (0.0, f64::INFINITY);
        for s in 0..=steps {
            let z = -3.0 + s as f64 * 1e-4;
            let v = 0.5 * (z - x) * (z - x) + t * z.abs();
            if v < best_v {
                best_v = v;
                best_z = z;
            }
        }
        assert!((soft_threshold(x, t).unwrap() - best_z).abs() < 1e-3, "x={x} t={t}");
    }
}

#[test]
fn lambda_update_is_blockwise_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let shape = [4, 3, 5];
    let graphs = vec![ring_graph(4, 0.7)];
    for trial in 0..10 {
        let y = random_tensor(&mut rng, &shape);
        let mut m = random_model(&mut rng, &shape, 3);
        let cfg = SolverConfig {
            alpha: 0.2,
            beta: rng.random_range(0.0..0.5),
            graph_weights: vec![0.7],
            ..SolverConfig::new(3)
        };
        let r = trial % 3;
        let y_r = residual_tensor(&y, &m, r).unwrap();
        let lambda = update_lambda(&y_r, &m.component(r), cfg.beta).unwrap();
        m.weights_mut()[r] = lambda;
        let base = objective(&y, &m, &cfg, &graphs).unwrap();
        for _ in 0..100 {
            let mut p = m.clone();
            p.weights_mut()[r] = lambda + rng.random_range(-1.0..1.0);
            assert!(objective(&y, &p, &cfg, &graphs).unwrap() >= base - 1e-12);
        }
    }
}

#[test]
fn completion_update_never_raises_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..50 {
        let shape = [3, 4, 2];
        let x = random_tensor(&mut rng, &shape);
        let m = random_model(&mut rng, &shape, 2);
        let flags = (0..24).map(|_| rng.random_bool(0.6)).collect();
        let mask = ObservationMask::new(shape.to_vec(), flags).unwrap();
        // Any tensor agreeing with x on the mask.
        let noise = random_tensor(&mut rng, &shape);
        let y = wdgtc::tensor::project_replace(&noise, &mask, &x).unwrap();
        let recon = cp_reconstruct(&m, &shape).unwrap();
        let before = sq_frobenius_diff(&y, &recon, None).unwrap();
        let next = update_completion(&y, &x, &mask, &m).unwrap();
        let after = sq_frobenius_diff(&next, &recon, None).unwrap();
        assert!(after <= before);
    }
}

/// Central finite differences of the smooth objective in every weight and
/// factor entry, compared as whole vectors.
fn gradient_rel_error(y: &DenseTensor, m: &CpModel, cfg: &SolverConfig, graphs: &[GraphPenalty]) -> f64 {
    let h = 1e-5;
    let g = smooth_gradient(y, m, cfg, graphs).unwrap();
    let f = |m: &CpModel| smooth_objective(y, m, cfg, graphs).unwrap();
    let (mut diff2, mut norm2) = (0.0, 0.0);
    for r in 0..m.rank() {
        let (mut plus, mut minus) = (m.clone(), m.clone());
        plus.weights_mut()[r] += h;
        minus.weights_mut()[r] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        diff2 += (fd - g.weights[r]).powi(2);
        norm2 += g.weights[r].powi(2);
        for k in 0..m.ndim() {
            for i in 0..m.factors()[k].nrows() {
                let mut col = m.column(k, r).to_vec();
                let (mut plus, mut minus) = (m.clone(), m.clone());
                col[i] += h;
                plus.set_column(k, r, &col);
                col[i] -= 2.0 * h;
                minus.set_column(k, r, &col);
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                diff2 += (fd - g.factors[k][(i, r)]).powi(2);
                norm2 += g.factors[k][(i, r)].powi(2);
            }
        }
    }
    (diff2 / norm2).sqrt()
}

#[test]
fn smooth_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let shape = [4, 3, 2];
        let y = random_tensor(&mut rng, &shape);
        let m = random_model(&mut rng, &shape, 2);
        let graphs = vec![ring_graph(4, 0.0), ring_graph(4, 0.0)];
        let cfg = SolverConfig { graph_weights: vec![0.8, 2.5], ..SolverConfig::new(2) };
        assert!(gradient_rel_error(&y, &m, &cfg, &graphs) < 1e-5);
    }
}

#[test]
fn rank_one_recovery() {
    let s = generate_wdg(&[5, 5, 5], 1, 1, 0.0, 4).unwrap();
    let mask = apply_missing(&[5, 5, 5], MissingPattern::Random { rate: 0.1 }, 9).unwrap();
    let cfg = SolverConfig { beta: 1e-3, tol: 1e-12, seed: 4, ..SolverConfig::new(1) };
    let r = solve(&s.truth, &mask, &cfg, &[]).unwrap();
    let miss = mask.complement();
    let err = sq_frobenius_diff(&r.completed, &s.truth, Some(&miss)).unwrap().sqrt()
        / sq_frobenius_diff(&s.truth, &DenseTensor::zeros(&[5, 5, 5]).unwrap(), Some(&miss)).unwrap().sqrt();
    assert!(err < 1e-3, "relative error {err}");
    assert_eq!(r.final_rank, 1);
}

#[test]
fn huge_beta_collapses_rank() {
    let s = generate_wdg(&[6, 5, 4], 2, 1, 0.05, 8).unwrap();
    let mask = apply_missing(&[6, 5, 4], MissingPattern::Random { rate: 0.2 }, 1).unwrap();
    let observed = s.truth.masked(&mask).unwrap();
    let cfg = SolverConfig { beta: 1.01 * observed.frobenius_norm(), ..SolverConfig::new(4) };
    let r = solve(&s.truth, &mask, &cfg, &[]).unwrap();
    assert_eq!(r.termination, Termination::RankCollapsed);
    assert_eq!(r.final_rank, 0);
    assert_eq!(r.sweeps.len(), 1);
    assert_eq!(r.completed, observed);
}

#[test]
fn fully_observed_is_returned_verbatim() {
    let s = generate_wdg(&[4, 6, 3], 2, 1, 0.2, 2).unwrap();
    let mask = ObservationMask::filled(&[4, 6, 3], true).unwrap();
    let r = solve(&s.truth, &mask, &SolverConfig::new(3), &[]).unwrap();
    assert_eq!(r.completed, s.truth);
}

#[test]
fn solve_is_deterministic_and_keeps_observed_cells() {
    let s = generate_wdg(&[9, 10, 6], 3, 1, 0.1, 12).unwrap();
    let mask = apply_missing(&[9, 10, 6], MissingPattern::Random { rate: 0.3 }, 12).unwrap();
    let graphs: Vec<GraphPenalty> = s.graphs.iter().map(|a| GraphPenalty::new(a.clone(), 5.0).unwrap()).collect();
    let cfg = SolverConfig { alpha: 0.01, beta: 0.5, seed: 3, ..SolverConfig::new(5) }.with_graph_weights_from(&graphs);
    let a = solve(&s.truth, &mask, &cfg, &graphs).unwrap();
    let b = solve(&s.truth, &mask, &cfg, &graphs).unwrap();
    assert_eq!(a, b);
    for ((&c, &x), &m) in a.completed.values().iter().zip(s.truth.values()).zip(mask.flags()) {
        if m {
            assert_eq!(c.to_bits(), x.to_bits());
        }
    }
    let first = a.objective_trace[0];
    assert!(*a.objective_trace.last().unwrap() <= first + 1e-9 * (1.0 + first.abs()));
    assert_eq!(a.final_rank, a.model.rank());
    for sweep in &a.sweeps {
        assert!(sweep.loss_after_refresh <= sweep.loss_before_refresh);
    }
}

#[test]
fn rank_non_increasing_in_beta() {
    let s = generate_wdg(&[12, 10, 8], 3, 1, 0.1, 21).unwrap();
    let mask = apply_missing(&[12, 10, 8], MissingPattern::Random { rate: 0.2 }, 21).unwrap();
    let mut prev = usize::MAX;
    for beta in [0.0, 1.0, 5.0, 20.0, 100.0] {
        let cfg = SolverConfig { beta, seed: 21, ..SolverConfig::new(8) };
        let rank = solve(&s.truth, &mask, &cfg, &[]).unwrap().final_rank;
        assert!(rank <= prev, "beta {beta}: rank {rank} > {prev}");
        prev = rank;
    }
}

#[test]
fn solve_input_errors() {
    let x = DenseTensor::zeros(&[3, 3]).unwrap();
    let mask = ObservationMask::filled(&[3, 3], true).unwrap();
    let cfg = SolverConfig { graph_weights: vec![1.0], ..SolverConfig::new(2) };
    // Weight count disagrees with graph count.
    assert!(solve(&x, &mask, &cfg, &[]).is_err());
    // Graph sized for the wrong mode.
    assert!(solve(&x, &mask, &cfg, &[ring_graph(4, 1.0)]).is_err());
    let other = ObservationMask::filled(&[3, 4], true).unwrap();
    assert!(solve(&x, &other, &SolverConfig::new(1), &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn prox_is_minimizer(x in -10.0f64..10.0, t in 0.0f64..5.0, z in -10.0f64..10.0) {
        let p = soft_threshold(x, t).unwrap();
        let f = |z: f64| 0.5 * (z - x) * (z - x) + t * z.abs();
        prop_assert!(f(p) <= f(z) + 1e-12);
    }
}
