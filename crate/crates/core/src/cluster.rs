//! Spherical k-means on unit-norm rows.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// `k x d`, unit rows.
    #[serde(skip)]
    pub centroids: DMatrix<f64>,
    /// Sum over rows of `1 - cos(row, assigned centroid)`.
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

fn check_rows(embeddings: &DMatrix<f64>) -> Result<()> {
    for (i, row) in embeddings.row_iter().enumerate() {
        let n = row.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("embedding row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

fn set_row(m: &mut DMatrix<f64>, i: usize, src: &DMatrix<f64>, j: usize) {
    for c in 0..m.ncols() {
        m[(i, c)] = src[(j, c)];
    }
}

/// Greedy k-means++ seeding with `1 - cos` as the sampling weight: each step
/// draws `2 (2 + ln k)` candidates and keeps the one lowering the potential most.
fn seed_centroids<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, r: &mut R) -> DMatrix<f64> {
    let n = x.nrows();
    let trials = 2 * (2 + (k as f64).ln().floor() as usize);
    let mut centroids = DMatrix::zeros(k, x.ncols());
    let first = r.random_range(0..n);
    set_row(&mut centroids, 0, x, first);
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let gap = |i: usize, j: usize| (1.0 - x.row(i).dot(&x.row(j))).max(0.0);
    let mut dist: Vec<f64> = (0..n).map(|i| gap(i, first)).collect();
    for c in 1..k {
        let candidates: Vec<usize> = match WeightedIndex::new(&dist) {
            Ok(w) => (0..trials).map(|_| w.sample(r)).collect(),
            // every remaining point coincides with a centroid
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                vec![free[r.random_range(0..free.len())]]
            }
        };
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for cand in candidates {
            let next: Vec<f64> = dist.iter().enumerate().map(|(i, &d)| d.min(gap(i, cand))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.1) {
                best = Some((cand, potential, next));
            }
        }
        let (next, _, updated) = best.expect("at least one candidate");
        chosen[next] = true;
        set_row(&mut centroids, c, x, next);
        dist = updated;
    }
    centroids
}

/// Assigns every row to its most similar centroid (lowest index on ties).
fn assign(x: &DMatrix<f64>, centroids: &DMatrix<f64>, labels: &mut [usize]) -> (f64, Vec<f64>) {
    let sims = x * centroids.transpose();
    let mut inertia = 0.0;
    let mut cost = vec![0.0; x.nrows()];
    for i in 0..x.nrows() {
        let mut best = 0;
        for c in 1..centroids.nrows() {
            if sims[(i, c)] > sims[(i, best)] {
                best = c;
            }
        }
        labels[i] = best;
        cost[i] = (1.0 - sims[(i, best)]).max(0.0);
        inertia += cost[i];
    }
    (inertia, cost)
}

/// One Lloyd run from k-means++ seeding.
pub fn spherical_kmeans(embeddings: &DMatrix<f64>, k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let n = embeddings.nrows();
    if k == 0 {
        return Err(Error::config("k must be positive"));
    }
    if k > n {
        return Err(Error::Capacity {
            requested: k,
            available: n,
        });
    }
    if max_iters == 0 {
        return Err(Error::config("max_iters must be positive"));
    }
    check_rows(embeddings)?;
    let d = embeddings.ncols();
    let mut r = rng::seeded(seed);
    let mut centroids = seed_centroids(embeddings, k, &mut r);
    let mut labels = vec![usize::MAX; n];
    let (mut inertia, mut cost) = assign(embeddings, &centroids, &mut labels);
    let mut trace = vec![inertia];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = DMatrix::<f64>::zeros(k, d);
        for (i, &c) in labels.iter().enumerate() {
            for j in 0..d {
                sums[(c, j)] += embeddings[(i, j)];
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            let norm = sums.row(c).norm();
            if norm > 1e-12 {
                for j in 0..d {
                    centroids[(c, j)] = sums[(c, j)] / norm;
                }
            } else {
                // empty or zero-mean cluster: restart it at the worst-served point
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if cost[b] >= cost[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("k <= n leaves a point");
                taken[far] = true;
                cost[far] = 0.0;
                set_row(&mut centroids, c, embeddings, far);
            }
        }
        let previous = labels.clone();
        let (next_inertia, next_cost) = assign(embeddings, &centroids, &mut labels);
        inertia = next_inertia;
        cost = next_cost;
        trace.push(inertia);
        if labels == previous {
            converged = true;
            break;
        }
    }
    Ok(ClusterAssignment {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
        iterations,
        converged,
    })
}

/// Best (lowest inertia) of `restarts` independently seeded runs.
pub fn spherical_kmeans_restarts(
    embeddings: &DMatrix<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<ClusterAssignment> {
    if restarts == 0 {
        return Err(Error::config("restarts must be positive"));
    }
    let mut best: Option<ClusterAssignment> = None;
    for t in 0..restarts {
        let run = spherical_kmeans(embeddings, k, rng::derive_seed(seed, t as u64), max_iters)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
