use geonovel::rng::derive_seed;
use geonovel::spectral::{
    build_affinity, count_estimation_baseline, dense_spectrum, estimate_class_count, normalized_laplacian, EigenSolver,
    Level, SpectralConfig,
};
use geonovel::vmf::{sample, UnitVector, VmfParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// `per` vMF draws around each center, stacked in center order.
fn mixture(centers: &[Vec<f64>], kappa: f64, per: usize, seed: u64) -> DMatrix<f64> {
    let d = centers[0].len();
    let mut rows = Vec::with_capacity(centers.len() * per * d);
    for (c, mu) in centers.iter().enumerate() {
        let p = VmfParams::new(UnitVector::normalize(mu.clone()).unwrap(), kappa).unwrap();
        for z in sample(&p, per, derive_seed(seed, c as u64)).unwrap() {
            rows.extend_from_slice(z.as_slice());
        }
    }
    DMatrix::from_row_slice(centers.len() * per, d, &rows)
}

fn axis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// Two orthogonal super-directions, each split into two sub-directions
/// `angle_deg` apart along a private orthogonal axis.
fn hierarchy(d: usize, angle_deg: f64) -> Vec<Vec<f64>> {
    let h = angle_deg.to_radians() / 2.0;
    let mut out = Vec::new();
    for (sup, side) in [(0, 2), (1, 3)] {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; d];
            v[sup] = h.cos();
            v[side] = sign * h.sin();
            out.push(v);
        }
    }
    out
}

fn orthogonal_clusters(seed: u64) -> DMatrix<f64> {
    mixture(&[axis(16, 0), axis(16, 1), axis(16, 2)], 50.0, 100, seed)
}

#[test]
fn three_orthogonal_clusters() {
    let hits = (0..20)
        .filter(|&t| {
            let cfg = SpectralConfig { seed: t, ..Default::default() };
            estimate_class_count(&orthogonal_clusters(t), &cfg).unwrap().coarse_count == 3
        })
        .count();
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn planted_hierarchy_levels() {
    let (mut coarse, mut fine) = (0, 0);
    for t in 0..20 {
        let z = mixture(&hierarchy(16, 25.0), 80.0, 100, t);
        // the neighborhood must reach across sub-clusters for the coarse level to exist
        let cfg = SpectralConfig {
            seed: t,
            level: Level::Fine,
            neighbor_count: 150,
            ..Default::default()
        };
        let e = estimate_class_count(&z, &cfg).unwrap();
        coarse += usize::from(e.coarse_count == 2);
        fine += usize::from(e.fine_count == 4);
        assert_eq!(e.count(), e.fine_count);
    }
    assert!(coarse > 10 && fine > 10, "coarse {coarse}/20, fine {fine}/20");
}

#[test]
fn subspace_solver_matches_dense() {
    let z = mixture(&[axis(8, 0), axis(8, 1), axis(8, 2), axis(8, 3)], 20.0, 150, 4);
    let dense = estimate_class_count(&z, &SpectralConfig { solver: EigenSolver::Dense, ..Default::default() }).unwrap();
    let sub = estimate_class_count(&z, &SpectralConfig { solver: EigenSolver::Subspace, ..Default::default() }).unwrap();
    assert_eq!(sub.solver, EigenSolver::Subspace);
    assert_eq!(sub.eigenvalues.len(), sub.search_window.1 + 1);
    for (a, b) in sub.eigenvalues.iter().zip(&dense.eigenvalues) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    assert_eq!((sub.coarse_count, sub.fine_count), (dense.coarse_count, dense.fine_count));
}

#[test]
fn zero_multiplicity_counts_components() {
    for blocks in 1..=4 {
        // identical points per block, blocks mutually orthogonal
        let mut rows = Vec::new();
        for b in 0..blocks {
            for _ in 0..3 {
                rows.extend(axis(4, b));
            }
        }
        let z = DMatrix::from_row_slice(blocks * 3, 4, &rows);
        let g = build_affinity(&z, 5).unwrap();
        let zeros = dense_spectrum(&g).unwrap().iter().filter(|l| l.abs() < 1e-9).count();
        assert_eq!(zeros, blocks);
        assert_eq!(g.component_count(), blocks);
    }
}

#[test]
fn estimate_invariants_hold() {
    let e = estimate_class_count(&orthogonal_clusters(1), &SpectralConfig::default()).unwrap();
    let (lo, hi) = e.search_window;
    assert!(1 <= e.coarse_count && e.coarse_count <= e.fine_count && e.fine_count <= hi && lo <= e.coarse_count);
    assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(e.gaps.len(), e.eigenvalues.len() - 1);
}

#[test]
fn subsampling_rarely_changes_counts() {
    let changed = (0..20)
        .filter(|&t| {
            let z = orthogonal_clusters(100 + t);
            let full = estimate_class_count(&z, &SpectralConfig { seed: t, ..Default::default() }).unwrap();
            let sub = estimate_class_count(&z, &SpectralConfig { seed: t, max_points: 150, ..Default::default() }).unwrap();
            assert_eq!(sub.points_used, 150);
            full.coarse_count != sub.coarse_count
        })
        .count();
    assert!(changed <= 2, "{changed}/20");
}

#[test]
fn baseline_examples() {
    let tight = mixture(&[axis(8, 0)], 500.0, 60, 2);
    let b = count_estimation_baseline(&tight, 6, 0).unwrap();
    assert_eq!((b.count, b.degenerate), (2, true));
    let three = orthogonal_clusters(3);
    let b = count_estimation_baseline(&three, 8, 5).unwrap();
    assert_eq!(b.count, 3);
    assert!(!b.degenerate);
    assert_eq!(b, count_estimation_baseline(&three, 8, 5).unwrap());
    assert_eq!(b.inertias.len(), 8);
}

fn arb_points() -> impl Strategy<Value = DMatrix<f64>> {
    (6usize..40, 2usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-1.0f64..1.0, n * d).prop_filter_map("zero row", move |raw| {
            let mut m = DMatrix::from_row_slice(n, d, &raw);
            for mut row in m.row_iter_mut() {
                let norm = row.norm();
                if norm < 1e-3 {
                    return None;
                }
                row /= norm;
            }
            Some(m)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_spectrum_in_range(z in arb_points(), k in 1usize..8) {
        let g = build_affinity(&z, k).unwrap();
        let l = normalized_laplacian(&g).unwrap();
        prop_assert!((&l - l.transpose()).abs().max() <= 1e-12);
        for lambda in dense_spectrum(&g).unwrap() {
            prop_assert!((-1e-9..=2.0 + 1e-9).contains(&lambda));
        }
    }

    #[test]
    fn affinity_is_symmetric_and_nonnegative(z in arb_points(), k in 1usize..8) {
        let w = build_affinity(&z, k).unwrap().dense_weights();
        prop_assert!((&w - w.transpose()).abs().max() <= 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn counts_ignore_row_order(seed in 0u64..1000, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let z = mixture(&[axis(6, 0), axis(6, 1), axis(6, 2)], 40.0, 20, seed);
        let mut order: Vec<usize> = (0..z.nrows()).collect();
        order.shuffle(&mut geonovel::rng::seeded(perm_seed));
        let shuffled = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(order[i], j)]);
        let cfg = SpectralConfig { solver: EigenSolver::Dense, ..Default::default() };
        let a = estimate_class_count(&z, &cfg).unwrap();
        let b = estimate_class_count(&shuffled, &cfg).unwrap();
        prop_assert_eq!((a.coarse_count, a.fine_count), (b.coarse_count, b.fine_count));
    }
}
