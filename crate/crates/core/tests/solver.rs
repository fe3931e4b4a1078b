use mbflow::geometry::{Point3, PointCloud};
use mbflow::optim::{evaluate_field, solve_pair, NetworkConfig, SolveConfig};
use mbflow::prior::{init_prior, MlpArchitecture};
use mbflow::synth::{generate, SceneSpec};
use mbflow::{flow_metrics, DbscanParams, FlowField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick() -> SolveConfig {
    SolveConfig {
        max_iters: 150,
        patience: 20,
        network: NetworkConfig {
            hidden_width: 32,
            ..NetworkConfig::default()
        },
        dbscan: DbscanParams {
            eps: 0.8,
            min_points: 8,
        },
        ..SolveConfig::default()
    }
}

fn scene_pair(seed: u64) -> (PointCloud<f64>, PointCloud<f64>, FlowField) {
    let spec = SceneSpec {
        body_count: 2,
        points_per_body: 150,
        background_points: 100,
        frame_count: 2,
        seed,
        ..SceneSpec::default()
    };
    let s = generate::<f64>(&spec).unwrap();
    (s.frames[0].clone(), s.frames[1].clone(), s.gt_flows[0].clone())
}

#[test]
fn best_loss_is_monotone_and_stopping_respects_patience() {
    let (src, tgt, _) = scene_pair(3);
    let cfg = quick();
    let r = solve_pair(&src, &tgt, &cfg).unwrap();
    assert_eq!(r.trace.len(), r.iterations);
    let mut best = f64::INFINITY;
    for t in &r.trace {
        let next = best.min(t.total);
        assert!(next <= best);
        best = next;
    }
    assert_eq!(best, r.best_loss());
    assert!(r.iterations <= r.best_iter + cfg.patience + 1);
    if r.iterations < cfg.max_iters {
        // stopped early: exactly `patience` iterations without improvement
        assert_eq!(r.iterations, r.best_iter + cfg.patience + 1);
    }
    // the returned flow belongs to the best iterate
    assert_eq!(evaluate_field(&r.net, &src).unwrap(), r.flow);
}

#[test]
fn tiny_patience_stops_early() {
    let (src, tgt, _) = scene_pair(4);
    let cfg = SolveConfig {
        max_iters: 400,
        patience: 1,
        learning_rate: 0.5,
        ..quick()
    };
    let r = solve_pair(&src, &tgt, &cfg).unwrap();
    assert!(r.iterations < cfg.max_iters);
    assert!(r.iterations <= r.best_iter + 2);
}

#[test]
fn repeated_solves_are_identical() {
    let (src, tgt, _) = scene_pair(5);
    let a = solve_pair(&src, &tgt, &quick()).unwrap();
    let b = solve_pair(&src, &tgt, &quick()).unwrap();
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(a.cluster_count, b.cluster_count);
}

#[test]
fn zero_omega_is_the_baseline() {
    let (src, tgt, _) = scene_pair(6);
    let zero = SolveConfig { omega: 0.0, ..quick() };
    let a = solve_pair(&src, &tgt, &zero).unwrap();
    let b = solve_pair(&src, &tgt, &quick().baseline()).unwrap();
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.trace.iter().map(|t| t.total).collect::<Vec<_>>(), b.trace.iter().map(|t| t.total).collect::<Vec<_>>());
    assert!(b.clusters.is_none());
    assert!(b.trace.iter().all(|t| t.multibody == 0.0));
}

#[test]
fn static_scene_recovers_zero_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts: Vec<Point3<f64>> = (0..200)
        .map(|_| Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..2.0)))
        .collect();
    let cloud = PointCloud::new(pts).unwrap();
    let cfg = SolveConfig {
        max_iters: 600,
        patience: 100,
        ..quick()
    };
    for c in [cfg, cfg.baseline()] {
        let r = solve_pair(&cloud, &cloud, &c).unwrap();
        let m = flow_metrics(&r.flow, &FlowField::zeros(cloud.len())).unwrap();
        assert!(m.epe < 1e-3, "epe {}", m.epe);
    }
}

#[test]
fn regularized_solve_is_no_worse_on_rigid_bodies() {
    let (src, tgt, gt) = scene_pair(7);
    let cfg = SolveConfig {
        max_iters: 400,
        patience: 50,
        ..quick()
    };
    let mb = solve_pair(&src, &tgt, &cfg).unwrap();
    let base = solve_pair(&src, &tgt, &cfg.baseline()).unwrap();
    let e_mb = flow_metrics(&mb.flow, &gt).unwrap().epe;
    let e_base = flow_metrics(&base.flow, &gt).unwrap().epe;
    assert!(mb.cluster_count >= 2);
    assert!(e_mb <= e_base, "rigidity {e_mb} vs baseline {e_base}");
}

#[test]
fn duplicate_queries_give_duplicate_outputs() {
    let net = init_prior::<f64>(MlpArchitecture::scene_flow(32, 3), 2).unwrap();
    let p = Point3::new(0.3, -1.2, 0.7);
    let q = PointCloud::new(vec![p, Point3::new(2.0, 0.0, 0.0), p]).unwrap();
    let f = evaluate_field(&net, &q).unwrap();
    assert_eq!(f[0], f[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn midpoint_flow_stays_within_the_lipschitz_bound(
        seed in 0u64..1000,
        a in (-10.0..10.0f64, -10.0..10.0f64, -2.0..2.0f64),
        d in (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64),
    ) {
        let net = init_prior::<f64>(MlpArchitecture::scene_flow(32, 4), seed).unwrap();
        let l = net.lipschitz_bound();
        let p = Point3::new(a.0, a.1, a.2);
        let q = p + Point3::new(d.0, d.1, d.2);
        let mid = (p + q) * 0.5;
        let f = evaluate_field(&net, &PointCloud::new(vec![p, q, mid]).unwrap()).unwrap();
        // |Φ(m) − Φ(p)| ≤ L|m − p|, likewise for q
        let half = 0.5 * (q - p).norm();
        prop_assert!((f[2] - f[0]).norm() <= l * half * (1.0 + 1e-9) + 1e-12);
        prop_assert!((f[2] - f[1]).norm() <= l * half * (1.0 + 1e-9) + 1e-12);
        // so the midpoint flow lies within L·|p−q|/2 of each neighbour's flow
        prop_assert!((f[1] - f[0]).norm() <= l * 2.0 * half * (1.0 + 1e-9) + 1e-12);
    }
}
