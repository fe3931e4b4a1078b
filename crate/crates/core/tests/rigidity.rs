use mbflow::dbscan::{ClusterSet, DbscanParams};
use mbflow::geometry::{FlowField, Point3, PointCloud, RigidTransform};
use mbflow::losses::rigidity::{adjacency, mean_score, multibody_loss, spectral_score, MultiBodyConfig};
use mbflow::tape::{power_iterate, rayleigh_score};
use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3 as NVec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cluster(rng: &mut impl Rng, n: usize, spread: f64) -> Vec<Point3<f64>> {
    let c = Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), 0.0);
    (0..n)
        .map(|_| c + Point3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)))
        .collect()
}

fn rigid_flow(t: &RigidTransform<f64>, pts: &[Point3<f64>]) -> FlowField<f64> {
    FlowField::new(pts.iter().map(|p| t.apply(p) - *p).collect()).unwrap()
}

fn one_cluster(n: usize) -> ClusterSet {
    ClusterSet::single(n)
}

/// Best orthogonal fit (rotations and reflections) of `q ≈ M p + t`; RMS residual.
fn orthogonal_fit_residual(p: &[Point3<f64>], q: &[Point3<f64>]) -> f64 {
    let n = p.len() as f64;
    let v = |a: &Point3<f64>| NVec::new(a.x, a.y, a.z);
    let cp = p.iter().map(v).sum::<NVec<f64>>() / n;
    let cq = q.iter().map(v).sum::<NVec<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (v(a) - cp) * (v(b) - cq).transpose();
    }
    let svd = h.svd(true, true);
    let m = svd.v_t.unwrap().transpose() * svd.u.unwrap().transpose();
    let t = cq - m * cp;
    let sq: f64 = p.iter().zip(q).map(|(a, b)| (m * v(a) + t - v(b)).norm_squared()).sum();
    (sq / n).sqrt()
}

fn random_unit_diag(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    let mut a = Array2::from_elem((n, n), 1.0);
    for i in 0..n {
        for j in i + 1..n {
            let x = rng.gen_range(0.0..1.0);
            a[[i, j]] = x;
            a[[j, i]] = x;
        }
    }
    a
}

fn lambda_max(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    SymmetricEigen::new(m).eigenvalues.max()
}

/// `max over nonzero binary v` of `vᵀ A v` (or of `vᵀ A v / vᵀ v` when
/// `normalized`), by enumeration. Returns the value and the maximizing mask.
fn indicator_max(a: &Array2<f64>, normalized: bool) -> (f64, u32) {
    let n = a.nrows();
    assert!(n <= 15);
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 1u32..(1 << n) {
        let mut s = 0.0;
        for i in 0..n {
            if mask >> i & 1 == 0 {
                continue;
            }
            for j in 0..n {
                if mask >> j & 1 == 1 {
                    s += a[[i, j]];
                }
            }
        }
        if normalized {
            s /= mask.count_ones() as f64;
        }
        if s > best.0 {
            best = (s, mask);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_flow_is_all_ones_and_loss_free(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 3.0);
        let t = RigidTransform::random(&mut rng, 20.0);
        let flow = rigid_flow(&t, &pts);
        let cloud = PointCloud::new(pts).unwrap();
        let g = adjacency(&cloud, &flow, 0.03).unwrap();
        prop_assert!(g.a.iter().all(|&x| (x - 1.0).abs() < 1e-9));
        let l = multibody_loss(&cloud, &flow, &one_cluster(n), &MultiBodyConfig::default()).unwrap();
        prop_assert!(l.abs() < 1e-12);
    }

    #[test]
    fn unit_score_implies_an_isometry(seed in any::<u64>(), reflect in any::<bool>(), n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 2.0);
        let t = RigidTransform::random(&mut rng, 5.0);
        // a reflection also preserves every distance, so scores 1 as well
        let mirror = |p: Point3<f64>| if reflect { Point3::new(p.x, p.y, -p.z) } else { p };
        let moved: Vec<_> = pts.iter().map(|p| t.apply(&mirror(*p))).collect();
        let flow = FlowField::new(moved.iter().zip(&pts).map(|(q, p)| *q - *p).collect()).unwrap();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let g = adjacency(&cloud, &flow, 0.03).unwrap();
        let s = spectral_score(&g, &MultiBodyConfig::default()).unwrap().s;
        prop_assert!(s > 1.0 - 1e-12);
        prop_assert!(orthogonal_fit_residual(&pts, &moved) < 1e-6);
    }

    #[test]
    fn non_isometric_flow_scores_below_one(seed in any::<u64>(), n in 4usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 2.0);
        let stretch = rng.gen_range(1.05..1.5);
        let moved: Vec<_> = pts.iter().map(|p| Point3::new(p.x * stretch, p.y, p.z)).collect();
        let flow = FlowField::new(moved.iter().zip(&pts).map(|(q, p)| *q - *p).collect()).unwrap();
        let g = adjacency(&PointCloud::new(pts.clone()).unwrap(), &flow, 0.03).unwrap();
        let s = spectral_score(&g, &MultiBodyConfig::default()).unwrap().s;
        prop_assert!(s < 1.0 - 1e-6);
        prop_assert!(orthogonal_fit_residual(&pts, &moved) > 1e-6);
    }

    #[test]
    fn power_iteration_agrees_with_dense_eigensolver(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_unit_diag(&mut rng, n);
        let oracle = lambda_max(&a) / n as f64;
        let v10 = power_iterate(&a, 10).unwrap();
        prop_assert!((rayleigh_score(&a, &v10) - oracle).abs() < 1e-3);
        let v100 = power_iterate(&a, 100).unwrap();
        prop_assert!((rayleigh_score(&a, &v100) - oracle).abs() < 1e-8);
        let norm: f64 = v100.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let s = rayleigh_score(&a, &v100);
        prop_assert!(s >= 1.0 / n as f64 - 1e-12 && s <= 1.0 + 1e-12);
    }

    #[test]
    fn indicator_score_sits_between_mean_and_spectral(seed in any::<u64>(), n in 2usize..13) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_unit_diag(&mut rng, n);
        let nn = (n * n) as f64;
        let eq8 = mean_score(&a);
        let exact = lambda_max(&a) / n as f64;
        // with non-negative entries the plain indicator maximum is v = 1
        let (plain, mask) = indicator_max(&a, false);
        prop_assert_eq!(mask, (1u32 << n) - 1);
        prop_assert!((plain / nn - eq8).abs() < 1e-12);
        // the subset-selecting form is bounded by its spectral relaxation
        let (ratio, _) = indicator_max(&a, true);
        prop_assert!(eq8 <= ratio / n as f64 + 1e-12);
        prop_assert!(ratio / n as f64 <= exact + 1e-12);
    }

    #[test]
    fn loss_ignores_order_within_a_cluster(seed in any::<u64>(), n in 3usize..40) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 1.0);
        let flow: Vec<Point3<f64>> = (0..n).map(|_| Point3::new(rng.gen_range(0.0..0.05), rng.gen_range(0.0..0.05), 0.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let cfg = MultiBodyConfig::default();
        let a = multibody_loss(&PointCloud::new(pts.clone()).unwrap(), &FlowField::new(flow.clone()).unwrap(), &one_cluster(n), &cfg).unwrap();
        let b = multibody_loss(
            &PointCloud::new(perm.iter().map(|&k| pts[k]).collect()).unwrap(),
            &FlowField::new(perm.iter().map(|&k| flow[k]).collect()).unwrap(),
            &one_cluster(n),
            &cfg,
        )
        .unwrap();
        prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn hinge_is_monotone_in_the_distance_change(d0 in 0.1..5.0f64, e1 in 0.0..0.05f64, extra in 0.0..0.05f64, thr in 0.005..0.1f64) {
        let cloud = PointCloud::new(vec![Point3::zero(), Point3::new(d0, 0.0, 0.0)]).unwrap();
        let a_of = |e: f64| {
            let f = FlowField::new(vec![Point3::zero(), Point3::new(e, 0.0, 0.0)]).unwrap();
            adjacency(&cloud, &f, thr).unwrap().a[[0, 1]]
        };
        prop_assert!(a_of(e1 + extra) <= a_of(e1));
        let a = a_of(e1);
        prop_assert!((0.0..=1.0).contains(&a));
        if e1 >= thr {
            prop_assert_eq!(a, 0.0);
        }
    }

    #[test]
    fn huge_threshold_accepts_any_flow(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 2.0);
        let flow = FlowField::new((0..n).map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap();
        let cloud = PointCloud::new(pts).unwrap();
        let cfg = MultiBodyConfig { d_thr: 1e6, ..MultiBodyConfig::default() };
        let g = adjacency(&cloud, &flow, cfg.d_thr).unwrap();
        prop_assert!(g.a.iter().all(|&x| x > 1.0 - 1e-10));
        prop_assert!(multibody_loss(&cloud, &flow, &one_cluster(n), &cfg).unwrap() < 1e-10);
    }
}

#[test]
fn indicator_oracle_finds_the_clean_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_cluster(&mut rng, 12, 2.0);
    let t = RigidTransform::random(&mut rng, 2.0);
    let mut flow = rigid_flow(&t, &pts).vectors().to_vec();
    for k in [3, 7] {
        flow[k] += Point3::new(0.3, -0.2, 0.1) * (k as f64);
    }
    let g = adjacency(&PointCloud::new(pts).unwrap(), &FlowField::new(flow).unwrap(), 0.03).unwrap();
    let (best, mask) = indicator_max(&g.a, true);
    assert_eq!(mask, (1 << 12) - 1 - (1 << 3) - (1 << 7));
    assert!((best - 10.0).abs() < 1e-9);
    let s = spectral_score(&g, &MultiBodyConfig::default()).unwrap().s;
    assert!(s > mean_score(&g.a));
    assert!(s >= best / 12.0 - 1e-6);
}

#[test]
fn corrupted_flows_barely_move_the_spectral_score() {
    let (n, k, thr) = (100, 5, 0.03);
    let mut above = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_cluster(&mut rng, n, 2.0);
        let t = RigidTransform::random(&mut rng, 3.0);
        let mut flow = rigid_flow(&t, &pts).vectors().to_vec();
        for i in rand::seq::index::sample(&mut rng, n, k) {
            let dir = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            flow[i] += dir * (10.0 * thr / dir.norm());
        }
        let g = adjacency(&PointCloud::new(pts).unwrap(), &FlowField::new(flow).unwrap(), thr).unwrap();
        let s = spectral_score(&g, &MultiBodyConfig::default()).unwrap().s;
        let mean = mean_score(&g.a);
        // O(k/n) drop for the spectral score
        assert!(s > 1.0 - 2.0 * k as f64 / n as f64, "seed {seed}: s = {s}");
        above += usize::from(s > mean);
    }
    assert!(above >= 95, "{above}/100");
}

#[test]
fn noise_points_are_never_scored() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts = random_cluster(&mut rng, 20, 1.0);
    let t = RigidTransform::random(&mut rng, 1.0);
    let mut flow = rigid_flow(&t, &pts).vectors().to_vec();
    let mut labels = vec![0; 20];
    for i in [2, 5, 11] {
        labels[i] = -1;
        flow[i] += Point3::new(5.0, 0.0, 0.0);
    }
    let clusters = ClusterSet::from_labels(labels, DbscanParams::default()).unwrap();
    let l = multibody_loss(&PointCloud::new(pts).unwrap(), &FlowField::new(flow).unwrap(), &clusters, &MultiBodyConfig::default()).unwrap();
    assert!(l.abs() < 1e-12);
}
