//! Plumbing fitter: class-conditional k-means prototypes.
//!
//! This is deliberately not a gradient-based LVQ trainer. The explanation
//! engine only needs *a* model; prototypes are per-class k-means centroids
//! and metric factors are either supplied or estimated as inverse-covariance
//! whitening factors (pooled for a global metric, per cluster for local
//! ones).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{LvqModel, Metric, Prototype};

const KMEANS_MAX_ITER: usize = 100;

/// Metric requested from the fitter. `Global(None)` and `Local` estimate
/// whitening factors from the training data; anything supplied is taken as
/// given.
#[derive(Clone, Debug)]
pub enum FitMetric {
    Identity,
    Global(Option<DMatrix<f64>>),
    Local,
}

/// Fit `k` prototypes per class by running k-means inside each class.
pub fn fit_plumbing(
    points: &[DVector<f64>],
    labels: &[i64],
    k: usize,
    metric: FitMetric,
    seed: u64,
) -> Result<LvqModel> {
    if points.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if points.len() != labels.len() {
        return Err(Error::input(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::input("prototypes per class must be at least 1"));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::input(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
    }

    let mut classes: Vec<i64> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::input("need at least 2 classes"));
    }

    let mut prototypes = Vec::new();
    let mut cluster_members: Vec<Vec<usize>> = Vec::new();
    for (ci, &class) in classes.iter().enumerate() {
        let idx: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::input(format!(
                "class {class} has {} points, need at least {k}",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ci as u64));
        let (centroids, assignment) = kmeans(points, &idx, k, &mut rng);
        for (c, centroid) in centroids.into_iter().enumerate() {
            prototypes.push(Prototype::new(centroid, class));
            cluster_members.push(
                idx.iter()
                    .copied()
                    .filter(|&i| assignment[&i] == c)
                    .collect(),
            );
        }
    }

    let metric = match metric {
        FitMetric::Identity => Metric::Identity,
        FitMetric::Global(Some(omega)) => Metric::Global(omega),
        FitMetric::Global(None) => {
            let all: Vec<usize> = (0..points.len()).collect();
            Metric::Global(whitening_factor(points, &all))
        }
        FitMetric::Local => {
            for (p, members) in prototypes.iter_mut().zip(&cluster_members) {
                p.omega = Some(whitening_factor(points, members));
            }
            Metric::Local
        }
    };

    LvqModel::new(prototypes, metric)
}

/// Plain Lloyd iterations with k-means++ seeding, restricted to `idx`.
/// Returns centroids plus the final assignment (original index -> cluster).
fn kmeans(
    points: &[DVector<f64>],
    idx: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<DVector<f64>>, std::collections::HashMap<usize, usize>) {
    let dim = points[idx[0]].len();
    let mut centroids = seed_plus_plus(points, idx, k, rng);
    let mut assignment: Vec<usize> = vec![0; idx.len()];

    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (pos, &i) in idx.iter().enumerate() {
            let mut best = 0;
            let mut best_d = (&points[i] - &centroids[0]).norm_squared();
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = (&points[i] - centroid).norm_squared();
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if assignment[pos] != best {
                assignment[pos] = best;
                changed = true;
            }
        }

        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (pos, &i) in idx.iter().enumerate() {
            sums[assignment[pos]] += &points[i];
            counts[assignment[pos]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            } else {
                // Re-seed an empty cluster on the point farthest from its
                // current centroid; deterministic (lowest index on ties).
                let mut far_pos = 0;
                let mut far_d = -1.0;
                for (pos, &i) in idx.iter().enumerate() {
                    let d = (&points[i] - &centroids[assignment[pos]]).norm_squared();
                    if d > far_d {
                        far_d = d;
                        far_pos = pos;
                    }
                }
                centroids[c] = points[idx[far_pos]].clone();
                assignment[far_pos] = c;
            }
        }

        if !changed {
            break;
        }
    }

    let map = idx
        .iter()
        .enumerate()
        .map(|(pos, &i)| (i, assignment[pos]))
        .collect();
    (centroids, map)
}

fn seed_plus_plus(
    points: &[DVector<f64>],
    idx: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DVector<f64>> {
    let first = idx[rng.random_range(0..idx.len())];
    let mut centroids = vec![points[first].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = idx
            .iter()
            .map(|&i| {
                centroids
                    .iter()
                    .map(|c| (&points[i] - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            idx[rng.random_range(0..idx.len())]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = idx[idx.len() - 1];
            for (pos, &i) in idx.iter().enumerate() {
                target -= d2[pos];
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Inverse-covariance whitening factor for the given subset, with a small
/// ridge so degenerate clusters stay usable.
fn whitening_factor(points: &[DVector<f64>], idx: &[usize]) -> DMatrix<f64> {
    let dim = points[0].len();
    if idx.len() < 2 {
        return DMatrix::identity(dim, dim);
    }
    let mut mean = DVector::zeros(dim);
    for &i in idx {
        mean += &points[i];
    }
    mean /= idx.len() as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for &i in idx {
        let d = &points[i] - &mean;
        cov += &d * d.transpose();
    }
    cov /= (idx.len() - 1) as f64;
    let ridge = 1e-6 + 1e-3 * cov.trace() / dim as f64;
    for j in 0..dim {
        cov[(j, j)] += ridge;
    }
    math::inv_sqrt_psd(&cov, 1e-12)
}
