//! Synthetic tensors with planted cluster structure on the first mode.
//!
//! Entities of mode 0 are split into contiguous clusters. Every planted
//! component loads only on the entities of one cluster, so slices from
//! different clusters share no component. Graphs over mode 0 are built to
//! agree with the clustering.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::graph::Adjacency;
use crate::tensor::{cp_reconstruct, CpModel, DenseTensor, ObservationMask};

// Independent RNG streams derived from one seed.
const STREAM_MODEL: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_GRAPH: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct WdgScenario {
    /// Planted signal plus Gaussian noise.
    pub truth: DenseTensor,
    /// Block adjacency (weight 1 within clusters) followed by a noisy
    /// weighted variant.
    pub graphs: Vec<Adjacency>,
    /// Cluster label of each mode-0 entity.
    pub cluster_of: Vec<usize>,
    pub planted_model: CpModel,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl WdgScenario {
    /// The planted tensor before noise.
    pub fn noiseless(&self) -> DenseTensor {
        cp_reconstruct(&self.planted_model, self.truth.shape()).expect("planted model matches truth")
    }

    /// Root mean square of the noiseless signal.
    pub fn signal_rms(&self) -> f64 {
        let clean = self.noiseless();
        clean.frobenius_norm() / (clean.len() as f64).sqrt()
    }
}

/// Evenly splits `n` entities into `clusters` contiguous groups.
pub fn cluster_labels(n: usize, clusters: usize) -> Vec<usize> {
    (0..n).map(|i| i * clusters / n).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// A smooth profile of length `n`: offset plus three random harmonics.
fn smooth_profile(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset = rng.random_range(0.5..1.5);
    let harmonics: Vec<(f64, f64, f64)> = (1..=3)
        .map(|h| (h as f64, rng.random_range(0.1..1.0) / h as f64, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let profile = (0..n).map(|t| {
        let phase = std::f64::consts::TAU * t as f64 / n as f64;
        offset + harmonics.iter().map(|(h, a, p)| a * (h * phase + p).sin()).sum::<f64>()
    });
    unit(profile.collect())
}

/// Generates a scenario with `clusters` groups on mode 0 and
/// `rank_per_cluster` planted components per group.
///
/// Weights are scaled so that noiseless entries are of order one; the noise
/// standard deviation `noise_sigma` is absolute.
pub fn generate_wdg(
    dims: &[usize],
    clusters: usize,
    rank_per_cluster: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<WdgScenario> {
    if dims.len() < 2 {
        return input_err("need at least two modes");
    }
    if clusters == 0 || rank_per_cluster == 0 {
        return input_err("clusters and rank_per_cluster must be positive");
    }
    if dims[0] < clusters {
        return input_err(format!("{clusters} clusters exceed {} entities on mode 0", dims[0]));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return input_err(format!("noise sigma must be finite and nonnegative, got {noise_sigma}"));
    }
    // Validates the remaining dims.
    DenseTensor::zeros(dims)?;

    let n = dims[0];
    let cluster_of = cluster_labels(n, clusters);
    let rank = clusters * rank_per_cluster;
    let mut rng = rng_for(seed, STREAM_MODEL);

    let mut factors: Vec<DMatrix<f64>> = dims.iter().map(|&d| DMatrix::zeros(d, rank)).collect();
    let mut weights = Vec::with_capacity(rank);
    let trailing: usize = dims[1..].iter().product();
    for c in 0..clusters {
        let members: Vec<usize> = (0..n).filter(|&i| cluster_of[i] == c).collect();
        for p in 0..rank_per_cluster {
            let r = c * rank_per_cluster + p;
            let mut loading = vec![0.0; n];
            for &i in &members {
                let z: f64 = StandardNormal.sample(&mut rng);
                loading[i] = (1.0 + 0.3 * z).abs() + 0.05;
            }
            factors[0].column_mut(r).copy_from_slice(&unit(loading));
            for (k, &d) in dims.iter().enumerate().skip(1) {
                let profile = smooth_profile(d, &mut rng);
                factors[k].column_mut(r).copy_from_slice(&profile);
            }
            let scale: f64 = rng.random_range(1.0..2.0);
            weights.push(scale * ((members.len() * trailing) as f64).sqrt());
        }
    }
    let planted_model = CpModel::new(weights, factors)?;

    let clean = cp_reconstruct(&planted_model, dims)?;
    let truth = if noise_sigma > 0.0 {
        let mut noise_rng = rng_for(seed, STREAM_NOISE);
        let normal = Normal::new(0.0, noise_sigma).expect("sigma validated above");
        let values = clean.values().iter().map(|v| v + normal.sample(&mut noise_rng)).collect();
        DenseTensor::new(dims.to_vec(), values)?
    } else {
        clean
    };

    let block = DMatrix::from_fn(n, n, |i, j| {
        if i != j && cluster_of[i] == cluster_of[j] {
            1.0
        } else {
            0.0
        }
    });
    let mut graph_rng = rng_for(seed, STREAM_GRAPH);
    let mut noisy = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let w = if cluster_of[i] == cluster_of[j] {
                graph_rng.random_range(0.6..=1.0)
            } else {
                graph_rng.random_range(0.0..0.3)
            };
            noisy[(i, j)] = w;
            noisy[(j, i)] = w;
        }
    }

    Ok(WdgScenario {
        truth,
        graphs: vec![Adjacency::new(block)?, Adjacency::new(noisy)?],
        cluster_of,
        planted_model,
        noise_sigma,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum MissingPattern {
    /// Each cell goes missing independently with probability `rate`.
    Random { rate: f64 },
    /// Cells whose last-mode index is at least `last_from` and whose
    /// second-mode index is at least `second_from` go missing.
    TailBlock { last_from: usize, second_from: usize },
}

/// Draws an observation mask over `shape`.
pub fn apply_missing(shape: &[usize], pattern: MissingPattern, seed: u64) -> Result<ObservationMask> {
    let mut mask = ObservationMask::filled(shape, true)?;
    let mut flags = mask.flags().to_vec();
    match pattern {
        MissingPattern::Random { rate } => {
            if !(0.0..1.0).contains(&rate) {
                return input_err(format!("missing rate must lie in [0, 1), got {rate}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for f in flags.iter_mut() {
                *f = rng.random::<f64>() >= rate;
            }
        }
        MissingPattern::TailBlock { last_from, second_from } => {
            let last = shape.len() - 1;
            if last_from >= shape[last] || second_from >= shape[1] {
                return input_err(format!(
                    "tail block bounds ({second_from}, {last_from}) outside shape {shape:?}"
                ));
            }
            let lead: usize = shape[0];
            let mid: usize = shape[1];
            // Offset = i0 + I0 * (i1 + I1 * rest); the last-mode index is the
            // slowest digit.
            let inner: usize = shape[..last].iter().product();
            for (offset, f) in flags.iter_mut().enumerate() {
                let second = (offset / lead) % mid;
                let last_idx = offset / inner;
                if second >= second_from && last_idx >= last_from {
                    *f = false;
                }
            }
        }
    }
    mask = ObservationMask::new(shape.to_vec(), flags)?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_dense() {
        let s = generate_wdg(&[6, 5, 4], 1, 2, 0.0, 3).unwrap();
        assert!(s.planted_model.factors()[0].iter().all(|&v| v > 0.0));
        let a = s.graphs[0].weights();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a[(i, j)], if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn noiseless_block_sparse() {
        let s = generate_wdg(&[15, 20, 10], 3, 1, 0.0, 11).unwrap();
        assert_eq!(s.planted_model.rank(), 3);
        assert_eq!(s.truth, s.noiseless());
        let u = &s.planted_model.factors()[0];
        for r in 0..3 {
            for i in 0..15 {
                assert_eq!(u[(i, r)] != 0.0, s.cluster_of[i] == r, "entity {i} component {r}");
            }
        }
        for g in &s.graphs {
            let within = g.mean_weight_where(|i, j| s.cluster_of[i] == s.cluster_of[j]).unwrap();
            let across = g.mean_weight_where(|i, j| s.cluster_of[i] != s.cluster_of[j]).unwrap();
            assert!(within > across);
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let a = generate_wdg(&[9, 7, 5], 3, 2, 0.1, 42).unwrap();
        let b = generate_wdg(&[9, 7, 5], 3, 2, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_wdg(&[9, 7, 5], 3, 2, 0.1, 43).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn noise_does_not_change_planted_model() {
        let a = generate_wdg(&[9, 7, 5], 3, 2, 0.0, 5).unwrap();
        let b = generate_wdg(&[9, 7, 5], 3, 2, 0.5, 5).unwrap();
        assert_eq!(a.planted_model, b.planted_model);
    }

    #[test]
    fn too_many_clusters() {
        assert!(generate_wdg(&[15, 5, 5], 20, 1, 0.0, 0).is_err());
    }

    #[test]
    fn random_missing_edges() {
        let m = apply_missing(&[4, 5, 6], MissingPattern::Random { rate: 0.0 }, 1).unwrap();
        assert_eq!(m.observed_count(), 120);
        assert!(apply_missing(&[4, 5], MissingPattern::Random { rate: 1.0 }, 1).is_err());
        assert!(apply_missing(&[4, 5], MissingPattern::Random { rate: -0.1 }, 1).is_err());
    }

    #[test]
    fn tail_block_layout() {
        let m = apply_missing(&[2, 3, 4], MissingPattern::TailBlock { last_from: 3, second_from: 1 }, 0).unwrap();
        for k in 0..4 {
            for j in 0..3 {
                for i in 0..2 {
                    let missing = k >= 3 && j >= 1;
                    assert_eq!(m.is_observed(&[i, j, k]).unwrap(), !missing);
                }
            }
        }
        assert!(apply_missing(&[2, 3, 4], MissingPattern::TailBlock { last_from: 4, second_from: 0 }, 0).is_err());
    }
}
