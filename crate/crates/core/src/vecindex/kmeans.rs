//! Lloyd's k-means with k-means++ seeding.
//!
//! Centroids are kept in `f64` while iterating so that the inertia sequence
//! is monotone; the result is rounded to `f32` once at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// `k * dim` values, row-major.
    pub centroids: Vec<f32>,
    /// Cluster of every input point after the last assignment step.
    pub assignments: Vec<usize>,
    /// Inertia measured at every assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

fn sq_dist(point: &[f32], centroid: &[f64]) -> f64 {
    point
        .iter()
        .zip(centroid)
        .map(|(&x, &c)| {
            let d = x as f64 - c;
            d * d
        })
        .sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&x| x as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..n)
        };
        centroids.extend(row(pick).iter().map(|&x| x as f64));
        let newest = &centroids[c * dim..];
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let nd = sq_dist(row(i), newest);
            if nd < *d {
                *d = nd;
            }
        });
    }
    centroids
}

/// Clusters `points` (`n * dim`, row-major) into `k` groups.
pub fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::Argument(format!("point buffer of {} is not a multiple of dim {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Argument(format!("k-means needs n >= k >= 1 (n={n}, k={k})")));
    }
    if iters == 0 {
        return Err(Error::Argument("k-means needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, dim, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut inertia_history = Vec::with_capacity(iters);

    for _ in 0..iters {
        let assigned: Vec<(usize, f64)> = points.par_chunks_exact(dim).map(|p| nearest(p, &centroids, dim)).collect();
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        inertia_history.push(inertia);
        let changed = assigned.iter().zip(&assignments).any(|(a, &b)| a.0 != b);
        for (slot, a) in assignments.iter_mut().zip(&assigned) {
            *slot = a.0;
        }
        if !changed {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.chunks_exact(dim).zip(&assignments) {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        // Empty clusters take the points currently farthest from their centroid.
        let mut far: Vec<usize> = Vec::new();
        if counts.contains(&0) {
            far = (0..n).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        }
        let mut far = far.into_iter();
        for c in 0..k {
            let dst = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s * inv;
                }
            } else if let Some(p) = far.next() {
                for (d, &x) in dst.iter_mut().zip(&points[p * dim..(p + 1) * dim]) {
                    *d = x as f64;
                }
            }
        }
    }

    Ok(KMeans { dim, k, centroids: centroids.into_iter().map(|x| x as f32).collect(), assignments, inertia_history })
}
