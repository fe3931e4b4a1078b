#![allow(dead_code)]

use mbflow::dbscan::ClusterSet;
use mbflow::geometry::{Point3, PointCloud, RigidTransform};
use mbflow::losses::{total_loss, total_loss_and_grad, LossWeights, PairProblem};
use mbflow::prior::{init_prior, MlpArchitecture, NeuralPrior};
use mbflow::spatial::{build_index, DEFAULT_LEAF_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two compact 15-point bodies, each moved by its own rigid motion, with
/// the target resampled by a small jitter.
pub fn two_cluster_pair(seed: u64) -> (PointCloud<f64>, PointCloud<f64>, ClusterSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut labels = Vec::new();
    for (body, centre) in [(0, Point3::new(-1.0, 0.0, 0.0)), (1, Point3::new(1.0, 0.5, 0.0))] {
        let motion = RigidTransform::from_yaw(rng.gen_range(-0.2..0.2), Point3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), 0.0));
        for _ in 0..15 {
            let p = centre + Point3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2));
            let jitter = Point3::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
            src.push(p);
            tgt.push(motion.apply(&p) + jitter);
            labels.push(body);
        }
    }
    let clusters = ClusterSet::from_labels(labels, Default::default()).unwrap();
    (PointCloud::new(src).unwrap(), PointCloud::new(tgt).unwrap(), clusters)
}

pub fn small_net(seed: u64) -> NeuralPrior<f64> {
    init_prior(MlpArchitecture::scene_flow(16, 2), seed).unwrap()
}

/// Independent value of `L_CD + ω·L_MB`: brute-force truncated
/// bidirectional Chamfer, the hinge adjacency written out, and power
/// iteration from ones. With `frozen`, each cluster's eigenvector estimate
/// is taken from there instead of being recomputed.
pub fn oracle_loss(
    net: &NeuralPrior<f64>,
    source: &PointCloud<f64>,
    target: &PointCloud<f64>,
    clusters: &ClusterSet,
    weights: &LossWeights,
    frozen: Option<&[Vec<f64>]>,
) -> (f64, Vec<Vec<f64>>) {
    let flow = net.evaluate_flow(source).unwrap();
    let moved: Vec<Point3<f64>> = source.points().iter().zip(flow.vectors()).map(|(p, f)| *p + *f).collect();
    let cap = weights.chamfer.truncation * weights.chamfer.truncation;
    let one_way = |a: &[Point3<f64>], b: &[Point3<f64>]| {
        a.iter()
            .map(|p| b.iter().map(|q| p.distance_squared(q)).fold(f64::INFINITY, f64::min).min(cap))
            .sum::<f64>()
            / a.len() as f64
    };
    let mut loss = one_way(&moved, target.points());
    if weights.chamfer.bidirectional {
        loss += one_way(target.points(), &moved);
    }
    let mut vs = Vec::new();
    if weights.omega == 0.0 {
        return (loss, vs);
    }
    let thr2 = weights.multibody.d_thr * weights.multibody.d_thr;
    let mut total = 0.0;
    let members = clusters.members();
    for (c, idx) in members.iter().enumerate() {
        let n = idx.len();
        let mut a = vec![vec![0.0; n]; n];
        for (i, &pi) in idx.iter().enumerate() {
            for (j, &pj) in idx.iter().enumerate() {
                let d = source[pi].distance(&source[pj]);
                let dh = moved[pi].distance(&moved[pj]);
                a[i][j] = (1.0 - (d - dh) * (d - dh) / thr2).max(0.0);
            }
        }
        let av = |v: &[f64]| -> Vec<f64> { a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect() };
        let v = match frozen {
            Some(f) => f[c].clone(),
            None => {
                let mut v = vec![1.0; n];
                for _ in 0..weights.multibody.power_iters {
                    let u = av(&v);
                    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v = u.iter().map(|x| x / norm).collect();
                }
                v
            }
        };
        let s = v.iter().zip(av(&v)).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        total += s;
        vs.push(v);
    }
    let avg = (total / members.len() as f64).max(weights.multibody.score_floor);
    (loss - weights.omega * avg.ln(), vs)
}

/// Largest per-parameter relative disagreement between the recorded
/// gradient and central differences of the oracle loss. In stop-gradient
/// mode the oracle holds the eigenvector estimates at their unperturbed
/// values, which is the function that mode differentiates.
///
/// Components are compared relative to `max(|g|, |fd|, floor)`; the floor
/// keeps round-off in near-zero components from dominating.
pub fn gradient_check(
    net: &NeuralPrior<f64>,
    source: &PointCloud<f64>,
    target: &PointCloud<f64>,
    clusters: &ClusterSet,
    weights: &LossWeights,
    h: f64,
    floor: f64,
) -> f64 {
    let index = build_index(target, DEFAULT_LEAF_SIZE).unwrap();
    let problem = PairProblem {
        source,
        target,
        target_index: &index,
        clusters: Some(clusters),
    };
    let (terms, grad) = total_loss_and_grad(net, &problem, weights, 0).unwrap();
    let (value, vs) = oracle_loss(net, source, target, clusters, weights, None);
    assert!((value - terms.total).abs() <= 1e-10 * value.abs().max(1.0), "oracle {value} vs {}", terms.total);
    let frozen = weights.multibody.stop_grad_eigvec.then_some(vs.as_slice());
    let mut worst = 0.0f64;
    for k in 0..grad.len() {
        let eval = |delta: f64| {
            let mut p = net.clone();
            p.params_mut()[k] += delta;
            oracle_loss(&p, source, target, clusters, weights, frozen).0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = fd.abs().max(grad[k].abs()).max(floor);
        worst = worst.max((fd - grad[k]).abs() / scale);
    }
    worst
}

/// Plain central differences of the library's own loss value.
pub fn plain_gradient_error(
    net: &NeuralPrior<f64>,
    source: &PointCloud<f64>,
    target: &PointCloud<f64>,
    clusters: &ClusterSet,
    weights: &LossWeights,
    h: f64,
    floor: f64,
) -> f64 {
    let index = build_index(target, DEFAULT_LEAF_SIZE).unwrap();
    let problem = PairProblem {
        source,
        target,
        target_index: &index,
        clusters: Some(clusters),
    };
    let (_, grad) = total_loss_and_grad(net, &problem, weights, 0).unwrap();
    let mut worst = 0.0f64;
    for k in 0..grad.len() {
        let eval = |delta: f64| {
            let mut p = net.clone();
            p.params_mut()[k] += delta;
            total_loss(&p, &problem, weights).unwrap().total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(floor));
    }
    worst
}

/// Applies a few byte-level edits: overwrite, bit flip, truncation,
/// insertion, or duplication of a span.
pub fn mutate(mut bytes: Vec<u8>, edits: &[(u8, usize, u8)]) -> Vec<u8> {
    for &(op, at, val) in edits {
        let len = bytes.len();
        let at = if len == 0 { 0 } else { at % len };
        match op % 5 {
            0 if len > 0 => bytes[at] = val,
            1 if len > 0 => bytes[at] ^= 1 << (val % 8),
            2 => bytes.truncate(at),
            3 => bytes.insert(at, val),
            _ => {
                let end = (at + val as usize).min(len);
                let span = bytes[at..end].to_vec();
                bytes.splice(at..at, span);
            }
        }
    }
    bytes
}
