//! Adjacency construction over the entities of the weakly-dependent mode,
//! and the Laplacians used as smoothness penalties.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{input_err, Result};

/// Symmetric, nonnegative, zero-diagonal weight matrix over `n` entities.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    weights: DMatrix<f64>,
}

impl Adjacency {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n {
            return input_err(format!("adjacency must be square, got {}x{}", n, weights.ncols()));
        }
        if n == 0 {
            return input_err("adjacency has no entities");
        }
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return input_err(format!("adjacency diagonal entry {i} is nonzero"));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return input_err(format!("adjacency entry ({i},{j}) = {w} is not a finite nonnegative value"));
                }
                if w != weights[(j, i)] {
                    return input_err(format!("adjacency is not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Zeroes every edge weight strictly below `threshold`.
    pub fn thresholded(&self, threshold: f64) -> Self {
        Self {
            weights: self.weights.map(|w| if w < threshold { 0.0 } else { w }),
        }
    }

    /// Mean weight over ordered pairs `(i, j)`, `i != j`, accepted by `keep`.
    pub fn mean_weight_where(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Option<f64> {
        let n = self.n();
        let (mut sum, mut count) = (0.0, 0usize);
        for j in 0..n {
            for i in 0..n {
                if i != j && keep(i, j) {
                    sum += self.weights[(i, j)];
                    count += 1;
                }
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Cosine similarity between per-entity feature vectors.
///
/// The diagonal (self-similarity) is set to zero.
pub fn poi_similarity(poi_vectors: &[Vec<f64>]) -> Result<Adjacency> {
    let n = poi_vectors.len();
    if n < 2 {
        return input_err(format!("need at least 2 feature vectors, got {n}"));
    }
    let dim = poi_vectors[0].len();
    let mut norms = Vec::with_capacity(n);
    for (i, v) in poi_vectors.iter().enumerate() {
        if v.len() != dim {
            return input_err(format!("feature vector {i} has length {}, expected {dim}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return input_err(format!("feature vector {i} has a negative or non-finite entry"));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return input_err(format!("feature vector {i} is all zeros; cosine similarity is undefined"));
        }
        norms.push(norm);
    }
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = poi_vectors[i].iter().zip(&poi_vectors[j]).map(|(a, b)| a * b).sum();
            let cos = (dot / (norms[i] * norms[j])).clamp(0.0, 1.0);
            weights[(i, j)] = cos;
            weights[(j, i)] = cos;
        }
    }
    Adjacency::new(weights)
}

/// Hop counts from `source` by breadth-first search; `None` when unreachable.
fn bfs_hops(neighbors: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; neighbors.len()];
    hops[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        let next = hops[v].map(|h| h + 1);
        for &w in &neighbors[v] {
            if hops[w].is_none() {
                hops[w] = next;
                queue.push_back(w);
            }
        }
    }
    hops
}

/// Binary adjacency linking every pair within `max_hops` hops of each other
/// in the undirected graph given by `edges`.
pub fn khop_binary(n: usize, edges: &[(usize, usize)], max_hops: usize) -> Result<Adjacency> {
    if n == 0 {
        return input_err("graph has no nodes");
    }
    if max_hops == 0 {
        return input_err("hop bound must be at least 1");
    }
    let mut neighbors = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return input_err(format!("edge ({a},{b}) has an endpoint outside [0, {n})"));
        }
        if a != b {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
    }
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        for (j, h) in bfs_hops(&neighbors, i).into_iter().enumerate() {
            if i != j && h.is_some_and(|h| h <= max_hops) {
                weights[(i, j)] = 1.0;
            }
        }
    }
    Adjacency::new(weights)
}

/// Combinatorial Laplacian `D - A` with `D[i,i] = sum_j A[i,j]`.
pub fn laplacian(a: &Adjacency) -> DMatrix<f64> {
    let w = a.weights();
    let mut lap = -w.clone();
    for i in 0..a.n() {
        lap[(i, i)] = w.row(i).sum();
    }
    lap
}

/// One Laplacian smoothness term on the weakly-dependent mode.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPenalty {
    adjacency: Adjacency,
    laplacian: DMatrix<f64>,
    weight: f64,
}

impl GraphPenalty {
    pub fn new(adjacency: Adjacency, weight: f64) -> Result<Self> {
        if !weight.is_finite() || weight < 0.0 {
            return input_err(format!("graph penalty weight must be finite and nonnegative, got {weight}"));
        }
        let laplacian = laplacian(&adjacency);
        Ok(Self {
            adjacency,
            laplacian,
            weight,
        })
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    /// `x^T L x`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        quadratic_form(&self.laplacian, x)
    }
}

pub(crate) fn quadratic_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
    }

    #[test]
    fn cosine_examples() {
        let a = poi_similarity(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert!((a.weights()[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(a.weights()[(0, 0)], 0.0);

        let a = poi_similarity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.weights()[(1, 0)], 0.0);

        let a = poi_similarity(&[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert!((a.weights()[(0, 1)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(poi_similarity(&[vec![1.0, 0.0], vec![0.0, 0.0]]).is_err());
        assert!(poi_similarity(&[vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(poi_similarity(&[vec![1.0]]).is_err());
    }

    #[test]
    fn khop_path() {
        let edges = [(0, 1), (1, 2)];
        let a1 = khop_binary(3, &edges, 1).unwrap();
        assert_eq!(a1.weights(), &mat(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]));
        let a2 = khop_binary(3, &edges, 2).unwrap();
        assert_eq!(a2.weights()[(0, 2)], 1.0);
        assert_eq!(a2.weights()[(2, 0)], 1.0);

        let disconnected = khop_binary(2, &[], 5).unwrap();
        assert_eq!(disconnected.weights(), &DMatrix::zeros(2, 2));

        assert!(khop_binary(3, &[(0, 3)], 1).is_err());
        assert!(khop_binary(3, &edges, 0).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let a = Adjacency::new(mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(laplacian(&a), mat(&[&[1.0, -1.0], &[-1.0, 1.0]]));

        let empty = Adjacency::new(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(laplacian(&empty), DMatrix::zeros(3, 3));

        let path = khop_binary(3, &[(0, 1), (1, 2)], 1).unwrap();
        assert_eq!(
            laplacian(&path),
            mat(&[&[1.0, -1.0, 0.0], &[-1.0, 2.0, -1.0], &[0.0, -1.0, 1.0]])
        );
    }

    #[test]
    fn adjacency_validation() {
        assert!(Adjacency::new(mat(&[&[0.0, 1.0], &[0.5, 0.0]])).is_err());
        assert!(Adjacency::new(mat(&[&[0.0, -1.0], &[-1.0, 0.0]])).is_err());
        assert!(Adjacency::new(mat(&[&[1.0, 0.0], &[0.0, 0.0]])).is_err());
        assert!(Adjacency::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn penalty_weight_validation() {
        let a = Adjacency::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(GraphPenalty::new(a.clone(), -1.0).is_err());
        assert!(GraphPenalty::new(a, f64::NAN).is_err());
    }

    #[test]
    fn threshold_drops_weak_edges() {
        let a = poi_similarity(&[vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let t = a.thresholded(0.5);
        assert!(t.weights()[(0, 1)] > 0.7);
        assert_eq!(t.weights()[(0, 2)], 0.0);
    }
}
