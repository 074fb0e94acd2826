//! Class-count estimation from the eigengap of a normalized kNN-graph Laplacian.
//!
//! Affinities are rectified cosines `max(0, z_i^T z_j)`, sparsified to each
//! row's nearest neighbors, symmetrized by `max` and given unit self-loops.
//! The smallest Laplacian eigenvalues come either from a dense symmetric
//! solver or from Chebyshev-filtered subspace iteration on the sparse
//! normalized affinity `D^{-1/2} W D^{-1/2}`, whose leading eigenvalues are
//! `1 - lambda`.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::spherical_kmeans_restarts;
use crate::error::{Error, Result};
use crate::rng;

/// Symmetric sparse affinity graph with unit self-loops, stored by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub neighbor_count: usize,
    /// `row_start[i]..row_start[i + 1]` indexes row `i` in `cols`/`vals`, columns ascending.
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pub degree: Vec<f64>,
    /// Nodes left with only their self-loop.
    pub isolated: Vec<usize>,
}

impl AffinityGraph {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn has_isolated_nodes(&self) -> bool {
        !self.isolated.is_empty()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[i]..self.row_start[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let span = self.row_start[i]..self.row_start[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len()
    }

    pub fn dense_weights(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                w[(i, j)] = v;
            }
        }
        w
    }

    /// Number of connected components (self-loops ignored).
    pub fn component_count(&self) -> usize {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            components += 1;
            seen[s] = true;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for (j, v) in self.row(i) {
                    if v > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        components
    }

}

/// `S = D^{-1/2} W D^{-1/2}` with the scaling folded into the stored weights.
struct NormalizedAffinity<'a> {
    graph: &'a AffinityGraph,
    scaled: Vec<f64>,
}

impl<'a> NormalizedAffinity<'a> {
    fn new(graph: &'a AffinityGraph) -> Self {
        let inv: Vec<f64> = graph.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut scaled = Vec::with_capacity(graph.vals.len());
        for i in 0..graph.len() {
            for (j, v) in graph.row(i) {
                scaled.push(inv[i] * v * inv[j]);
            }
        }
        Self { graph, scaled }
    }

    /// `S X` for an `N x b` block.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, b) = x.shape();
        // node-major copy so each neighbor contributes one contiguous axpy
        let xt = x.transpose();
        let src = xt.as_slice();
        let mut out = DMatrix::<f64>::zeros(b, n);
        let dst = out.as_mut_slice();
        let g = self.graph;
        for i in 0..n {
            let row = &mut dst[i * b..(i + 1) * b];
            for k in g.row_start[i]..g.row_start[i + 1] {
                let v = self.scaled[k];
                let xj = &src[g.cols[k] * b..(g.cols[k] + 1) * b];
                for (o, &s) in row.iter_mut().zip(xj) {
                    *o += v * s;
                }
            }
        }
        out.transpose()
    }
}

fn check_unit_rows(z: &DMatrix<f64>) -> Result<()> {
    for (i, row) in z.row_iter().enumerate() {
        let n = row.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("embedding row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

/// Rectified-cosine kNN graph over unit rows.
pub fn build_affinity(embeddings: &DMatrix<f64>, neighbor_count: usize) -> Result<AffinityGraph> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::config(format!("affinity graph needs at least 2 points, got {n}")));
    }
    if neighbor_count == 0 {
        return Err(Error::config("neighbor_count must be positive"));
    }
    check_unit_rows(embeddings)?;
    let gram = embeddings * embeddings.transpose();
    let keep = neighbor_count.min(n - 1);
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        // the Gram matrix is symmetric, so column i is row i and contiguous
        let sims = gram.column(i);
        let sims = sims.as_slice();
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i));
        let by_weight = |&a: &usize, &b: &usize| sims[b].total_cmp(&sims[a]).then(a.cmp(&b));
        if keep < candidates.len() {
            candidates.select_nth_unstable_by(keep - 1, by_weight);
            candidates.truncate(keep);
        }
        for &j in &candidates {
            if sims[j] > 0.0 {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    let mut row_start = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut degree = Vec::with_capacity(n);
    let mut isolated = Vec::new();
    row_start.push(0);
    for (i, adj) in adjacency.iter_mut().enumerate() {
        adj.push(i);
        adj.sort_unstable();
        adj.dedup();
        if adj.len() == 1 {
            isolated.push(i);
        }
        let mut deg = 0.0;
        for &j in adj.iter() {
            let w = if i == j { 1.0 } else { gram[(i, j)].max(0.0) };
            cols.push(j);
            vals.push(w);
            deg += w;
        }
        degree.push(deg);
        row_start.push(cols.len());
    }
    Ok(AffinityGraph {
        neighbor_count,
        row_start,
        cols,
        vals,
        degree,
        isolated,
    })
}

/// `L = D^{-1/2} (D - W) D^{-1/2}`, dense.
pub fn normalized_laplacian(graph: &AffinityGraph) -> Result<DMatrix<f64>> {
    let n = graph.len();
    if let Some(i) = graph.degree.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Degenerate(format!("node {i} has zero degree")));
    }
    let inv: Vec<f64> = graph.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = DMatrix::identity(n, n);
    for i in 0..n {
        for (j, w) in graph.row(i) {
            l[(i, j)] -= inv[i] * w * inv[j];
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenSolver {
    /// Dense up to [`DENSE_LIMIT`] nodes, subspace iteration above.
    #[default]
    Auto,
    Dense,
    /// Chebyshev-filtered subspace iteration on the sparse normalized affinity.
    Subspace,
}

/// Graphs up to this many nodes use the dense solver under [`EigenSolver::Auto`].
pub const DENSE_LIMIT: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Inclusive gap-index window; `None` selects `(2, min(100, N / 10))`.
    pub window: Option<(usize, usize)>,
    pub level: Level,
    pub neighbor_count: usize,
    /// Inputs larger than this are uniformly subsampled first.
    pub max_points: usize,
    pub seed: u64,
    pub solver: EigenSolver,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            window: None,
            level: Level::Coarse,
            neighbor_count: 10,
            max_points: 2048,
            seed: 0,
            solver: EigenSolver::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralEstimate {
    /// Ascending Laplacian eigenvalues: the full spectrum from the dense
    /// solver, the leading `k_max + 1` from subspace iteration.
    pub eigenvalues: Vec<f64>,
    /// `gaps[i - 1] = lambda_{i+1} - lambda_i` (1-based `i`).
    pub gaps: Vec<f64>,
    pub coarse_count: usize,
    pub fine_count: usize,
    pub search_window: (usize, usize),
    pub level: Level,
    /// Number of points the graph was built on.
    pub points_used: usize,
    pub solver: EigenSolver,
    pub isolated_nodes: usize,
}

impl SpectralEstimate {
    /// The count at the requested level.
    pub fn count(&self) -> usize {
        match self.level {
            Level::Coarse => self.coarse_count,
            Level::Fine => self.fine_count,
        }
    }
}

/// Default window for `n` points: `(2, min(100, n / 10))`, widened to at
/// least `(2, 3)` and clipped to `n - 1` for small inputs.
pub fn default_window(n: usize) -> (usize, usize) {
    (2, (n / 10).clamp(3, 100).min(n.saturating_sub(1)))
}

fn validate_window(window: (usize, usize), n: usize) -> Result<()> {
    let (lo, hi) = window;
    if lo < 2 || lo >= hi || hi + 1 > n {
        return Err(Error::config(format!(
            "gap window ({lo}, {hi}) must satisfy 2 <= k_min < k_max <= N - 1 with N = {n}"
        )));
    }
    Ok(())
}

/// Dense ascending spectrum of `L`.
pub fn dense_spectrum(graph: &AffinityGraph) -> Result<Vec<f64>> {
    let l = normalized_laplacian(graph)?;
    let mut eig = SymmetricEigen::new(l).eigenvalues.as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

fn orthonormalize(x: DMatrix<f64>) -> DMatrix<f64> {
    x.qr().q()
}

/// Rayleigh-Ritz on the orthonormal block `x` with image `sx = S x`: rotates
/// both onto Ritz vectors and returns the Ritz values, all descending.
fn rayleigh_ritz(x: &mut DMatrix<f64>, sx: &mut DMatrix<f64>) -> Vec<f64> {
    let h = x.tr_mul(sx);
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let b = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]));
    let u = DMatrix::from_fn(b, b, |i, j| eig.eigenvectors[(i, order[j])]);
    *x = &*x * &u;
    *sx = &*sx * &u;
    order.iter().map(|&k| eig.eigenvalues[k]).collect()
}

/// Chebyshev polynomial of `S` of the given degree, mapped so that `[lower, cut]`
/// is damped to `[-1, 1]` and eigenvalues above `cut` are amplified.
fn chebyshev_filter(
    op: &NormalizedAffinity,
    x: &DMatrix<f64>,
    degree: usize,
    cut: f64,
    lower: f64,
) -> DMatrix<f64> {
    let e = (cut - lower) / 2.0;
    let c = (cut + lower) / 2.0;
    let mut prev = x.clone();
    let mut cur = (op.apply(x) - x * c) / e;
    for _ in 1..degree {
        let next = (op.apply(&cur) - &cur * c) * (2.0 / e) - &prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Largest `count` eigenvalues of `D^{-1/2} W D^{-1/2}` by Chebyshev-filtered
/// subspace iteration with Rayleigh-Ritz extraction. Returns `None` when the
/// block would not fit in the graph or the iteration stalls.
fn subspace_top(graph: &AffinityGraph, count: usize, seed: u64) -> Result<Option<Vec<f64>>> {
    const DEGREE: usize = 24;
    const MAX_ROUNDS: usize = 300;
    const TOLERANCE: f64 = 1e-10;
    let n = graph.len();
    let block = count + (count / 2).max(10);
    if block * 2 > n {
        return Ok(None);
    }
    let op = NormalizedAffinity::new(graph);
    let mut r = rng::seeded(seed);
    let start = DMatrix::from_fn(n, block, |_, _| {
        let z: f64 = StandardNormal.sample(&mut r);
        z
    });
    let mut x = orthonormalize(start);
    let mut sx = op.apply(&x);
    let mut theta = rayleigh_ritz(&mut x, &mut sx);
    // the spectrum of the normalized affinity lies in [-1, 1]
    let lower = -1.0;
    for _ in 0..MAX_ROUNDS {
        let cut = theta[block - 1];
        let filtered = chebyshev_filter(&op, &x, DEGREE, cut, lower);
        x = orthonormalize(filtered);
        sx = op.apply(&x);
        theta = rayleigh_ritz(&mut x, &mut sx);
        let mut worst: f64 = 0.0;
        for k in 0..count {
            let resid = sx.column(k) - x.column(k) * theta[k];
            worst = worst.max(resid.norm());
        }
        if worst <= TOLERANCE {
            theta.truncate(count);
            return Ok(Some(theta));
        }
    }
    Ok(None)
}

/// Ascending leading `count` eigenvalues of `L` via subspace iteration, or the
/// full dense spectrum when the iteration does not apply.
fn leading_spectrum(graph: &AffinityGraph, count: usize, solver: EigenSolver, seed: u64) -> Result<(Vec<f64>, EigenSolver)> {
    let use_dense = match solver {
        EigenSolver::Dense => true,
        EigenSolver::Subspace => false,
        EigenSolver::Auto => graph.len() <= DENSE_LIMIT,
    };
    if !use_dense {
        if let Some(top) = subspace_top(graph, count, seed)? {
            let mut lam: Vec<f64> = top.iter().map(|t| (1.0 - t).clamp(0.0, 2.0)).collect();
            lam.sort_by(f64::total_cmp);
            return Ok((lam, EigenSolver::Subspace));
        }
    }
    Ok((dense_spectrum(graph)?, EigenSolver::Dense))
}

/// `(coarse, fine)` from the gaps inside `window`.
fn pick_counts(gaps: &[f64], window: (usize, usize)) -> (usize, usize) {
    let (lo, hi) = window;
    let gap = |i: usize| gaps[i - 1];
    let mut coarse = lo;
    for i in lo..=hi {
        if gap(i) > gap(coarse) {
            coarse = i;
        }
    }
    let mut fine: Option<usize> = None;
    for i in (coarse + 1)..=hi {
        if fine.is_none_or(|f| gap(i) > gap(f)) {
            fine = Some(i);
        }
    }
    (coarse, fine.unwrap_or(coarse))
}

pub fn estimate_class_count(embeddings: &DMatrix<f64>, config: &SpectralConfig) -> Result<SpectralEstimate> {
    if config.max_points < 3 {
        return Err(Error::config("max_points must be at least 3"));
    }
    let total = embeddings.nrows();
    let sample: DMatrix<f64>;
    let z = if total > config.max_points {
        let mut r = rng::seeded(rng::derive_seed(config.seed, 0));
        let mut rows = index::sample(&mut r, total, config.max_points).into_vec();
        rows.sort_unstable();
        sample = DMatrix::from_fn(rows.len(), embeddings.ncols(), |i, j| embeddings[(rows[i], j)]);
        &sample
    } else {
        embeddings
    };
    let n = z.nrows();
    let window = config.window.unwrap_or_else(|| default_window(n));
    validate_window(window, n)?;
    let graph = build_affinity(z, config.neighbor_count)?;
    let (eigenvalues, solver) = leading_spectrum(&graph, window.1 + 1, config.solver, rng::derive_seed(config.seed, 1))?;
    let gaps: Vec<f64> = eigenvalues.windows(2).map(|w| w[1] - w[0]).collect();
    let (coarse_count, fine_count) = pick_counts(&gaps, window);
    Ok(SpectralEstimate {
        eigenvalues,
        gaps,
        coarse_count,
        fine_count,
        search_window: window,
        level: config.level,
        points_used: n,
        solver,
        isolated_nodes: graph.isolated.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineEstimate {
    pub count: usize,
    /// `inertias[k - 1]` for `k = 1..=k_max`.
    pub inertias: Vec<f64>,
    /// No pronounced elbow; `count` fell back to 2.
    pub degenerate: bool,
}

/// Restarts per k in [`count_estimation_baseline`].
pub const BASELINE_RESTARTS: usize = 10;
const BASELINE_MAX_ITERS: usize = 100;
/// An elbow must bend the inertia curve by this fraction of the one-cluster inertia.
const ELBOW_MIN_BEND: f64 = 0.1;

/// Sweep-k spherical k-means elbow: the `k` maximizing the second difference
/// `I(k-1) - 2 I(k) + I(k+1)` of the best-of-restarts inertia.
pub fn count_estimation_baseline(embeddings: &DMatrix<f64>, k_max: usize, seed: u64) -> Result<BaselineEstimate> {
    if k_max < 2 {
        return Err(Error::config(format!("k_max must be >= 2, got {k_max}")));
    }
    if k_max + 1 > embeddings.nrows() {
        return Err(Error::Capacity {
            requested: k_max + 1,
            available: embeddings.nrows(),
        });
    }
    // one extra k so the second difference exists at k_max
    let inertias = (1..=k_max + 1)
        .map(|k| Ok(spherical_kmeans_restarts(embeddings, k, rng::derive_seed(seed, k as u64), BASELINE_MAX_ITERS, BASELINE_RESTARTS)?.inertia))
        .collect::<Result<Vec<f64>>>()?;
    let bend = |k: usize| inertias[k - 2] - 2.0 * inertias[k - 1] + inertias[k];
    let mut best = 2;
    for k in 3..=k_max {
        if bend(k) > bend(best) {
            best = k;
        }
    }
    let degenerate = !(bend(best) > ELBOW_MIN_BEND * inertias[0]);
    let mut inertias = inertias;
    inertias.truncate(k_max);
    Ok(BaselineEstimate {
        count: if degenerate { 2 } else { best },
        inertias,
        degenerate,
    })
}

/// Wall-clock seconds of the spectral estimator and of the sweep-k baseline on the same input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub spectral_seconds: f64,
    pub baseline_seconds: f64,
    pub spectral: SpectralEstimate,
    pub baseline: BaselineEstimate,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.baseline_seconds / self.spectral_seconds
    }
}

/// Times both estimators with the same `k_max` (spectral window `(2, k_max)`).
pub fn bench_estimators(embeddings: &DMatrix<f64>, k_max: usize, config: &SpectralConfig) -> Result<BenchReport> {
    let spectral_config = SpectralConfig {
        window: Some((2, k_max)),
        ..*config
    };
    let t0 = Instant::now();
    let spectral = estimate_class_count(embeddings, &spectral_config)?;
    let spectral_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let baseline = count_estimation_baseline(embeddings, k_max, config.seed)?;
    let baseline_seconds = t1.elapsed().as_secs_f64();
    Ok(BenchReport {
        spectral_seconds,
        baseline_seconds,
        spectral,
        baseline,
    })
}
