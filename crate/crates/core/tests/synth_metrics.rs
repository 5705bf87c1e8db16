use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdgtc::graph::GraphPenalty;
use wdgtc::metrics::{grid_search, score, ParamGrid, SearchStrategy};
use wdgtc::synth::{apply_missing, generate_wdg, MissingPattern};
use wdgtc::tensor::{cp_reconstruct, DenseTensor, ObservationMask};
use wdgtc::SolverConfig;

#[test]
fn random_missing_concentrates() {
    let shape = [20, 30, 40];
    let n = 24_000.0;
    for (rate, seed) in [(0.3, 1), (0.9, 2), (1.0 - 0.05, 3)] {
        let m = apply_missing(&shape, MissingPattern::Random { rate }, seed).unwrap();
        let expected = (1.0 - rate) * n;
        let sd = (n * rate * (1.0 - rate)).sqrt();
        assert!((m.observed_count() as f64 - expected).abs() < 4.0 * sd);
    }
    // Nearly everything missing: observed fraction within 2% of epsilon.
    let eps = 0.05;
    let m = apply_missing(&shape, MissingPattern::Random { rate: 1.0 - eps }, 7).unwrap();
    let frac = m.observed_count() as f64 / n;
    assert!((frac - eps).abs() < 0.02 * eps.max(frac) + 4.0 * (eps * (1.0 - eps) / n).sqrt());
}

#[test]
fn tail_block_case_study_layout() {
    let m = apply_missing(&[15, 247, 51], MissingPattern::TailBlock { last_from: 50, second_from: 74 }, 0).unwrap();
    let missing = m.len() - m.observed_count();
    assert_eq!(missing, 15 * (247 - 74));
    let frac = missing as f64 / m.len() as f64;
    assert!((frac - 0.0131).abs() < 1e-3, "missing fraction {frac}");
}

#[test]
fn clusters_share_no_components() {
    let s = generate_wdg(&[9, 8, 5], 3, 2, 0.0, 77).unwrap();
    let model = &s.planted_model;
    for c in 0..3 {
        // Keep only the components planted for cluster c.
        let mut only_c = model.clone();
        for r in 0..model.rank() {
            if r / 2 != c {
                only_c.weights_mut()[r] = 0.0;
            }
        }
        let part = cp_reconstruct(&only_c, &[9, 8, 5]).unwrap();
        for (o, (&p, &t)) in part.values().iter().zip(s.truth.values()).enumerate() {
            let entity = o % 9;
            if s.cluster_of[entity] == c {
                assert_eq!(p, t, "slice {entity} depends on another cluster");
            } else {
                assert_eq!(p, 0.0, "cluster {c} leaks into entity {entity}");
            }
        }
    }
}

#[test]
fn per_slice_residuals_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [5, 4, 3];
    let truth = DenseTensor::new(shape.to_vec(), (0..60).map(|_| rng.random_range(1.0..5.0)).collect()).unwrap();
    let pred = DenseTensor::new(shape.to_vec(), truth.values().iter().map(|v| v + rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mask = ObservationMask::new(shape.to_vec(), (0..60).map(|_| rng.random_bool(0.5)).collect()).unwrap();
    for (mode, &len) in shape.iter().enumerate() {
        let r = score(&pred, &truth, &mask, Some(mode)).unwrap();
        let slices = r.per_slice.unwrap();
        assert_eq!(slices.len(), len);
        let total: f64 = slices.iter().map(|s| s.sq_residual).sum();
        assert!((total - r.mse * r.eval_cell_count as f64).abs() < 1e-10);
        assert_eq!(slices.iter().map(|s| s.cells).sum::<usize>(), r.eval_cell_count);
    }
    // RES uses the truth norm as its denominator.
    let swapped = score(&truth, &pred, &mask, None).unwrap();
    let direct = score(&pred, &truth, &mask, None).unwrap();
    assert_eq!(swapped.mse, direct.mse);
    let num: f64 = wdgtc::tensor::sq_frobenius_diff(&pred, &truth, Some(&mask)).unwrap();
    let den: f64 = truth.masked(&mask).unwrap().frobenius_norm().powi(2);
    assert!((direct.res - (num / den).sqrt()).abs() < 1e-14);
}

fn split_scenario(seed: u64) -> (wdgtc::WdgScenario, ObservationMask, ObservationMask) {
    let s = generate_wdg(&[9, 12, 8], 3, 1, 0.05, seed).unwrap();
    let observed = apply_missing(&[9, 12, 8], MissingPattern::Random { rate: 0.3 }, seed).unwrap();
    // Half of the missing cells become the validation set.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let val_flags = observed.flags().iter().map(|&o| !o && rng.random_bool(0.5)).collect();
    let val = ObservationMask::new(vec![9, 12, 8], val_flags).unwrap();
    (s, observed, val)
}

#[test]
fn singleton_grid_returns_its_point() {
    let (s, train, val) = split_scenario(1);
    let grid = ParamGrid { alpha: vec![0.01], beta: vec![0.5], graph_weights: vec![] };
    let base = SolverConfig { max_iter: 30, ..SolverConfig::new(4) };
    let out = grid_search(&s.truth, &train, &val, &s.truth, &[], &grid, SearchStrategy::Exhaustive, &base, 1).unwrap();
    assert_eq!(out.table.len(), 1);
    assert_eq!(out.best_index, 0);
    assert_eq!((out.best.alpha, out.best.beta), (0.01, 0.5));
}

#[test]
fn grid_search_replays_and_ignores_thread_count() {
    let (s, train, val) = split_scenario(2);
    let graphs: Vec<GraphPenalty> = s.graphs.iter().map(|a| GraphPenalty::new(a.clone(), 0.0).unwrap()).collect();
    let grid = ParamGrid {
        alpha: vec![0.0, 0.01],
        beta: vec![0.0, 1.0],
        graph_weights: vec![vec![0.0, 10.0], vec![0.0]],
    };
    let base = SolverConfig { max_iter: 20, seed: 5, ..SolverConfig::new(5) };
    let run = |threads| {
        grid_search(&s.truth, &train, &val, &s.truth, &graphs, &grid, SearchStrategy::Exhaustive, &base, threads).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.table, b.table);
    assert_eq!(a.best, b.best);
    assert_eq!(a.table.len(), 8);
    let min = a.table.iter().map(|r| r.mse).fold(f64::INFINITY, f64::min);
    assert_eq!(a.table[a.best_index].mse, min);
}

#[test]
fn grid_search_rejects_overlap_and_empty_grids() {
    let (s, train, _) = split_scenario(3);
    let base = SolverConfig::new(2);
    let grid = ParamGrid { alpha: vec![0.0], beta: vec![0.0], graph_weights: vec![] };
    assert!(grid_search(&s.truth, &train, &train, &s.truth, &[], &grid, SearchStrategy::Exhaustive, &base, 1).is_err());
    let empty = ParamGrid { alpha: vec![], beta: vec![0.0], graph_weights: vec![] };
    let val = train.complement();
    assert!(grid_search(&s.truth, &train, &val, &s.truth, &[], &empty, SearchStrategy::Exhaustive, &base, 1).is_err());
}
