//! Multi-body rigidity regularizer.
//!
//! Each cluster's flow is scored by how well it preserves pairwise
//! distances. The pairwise consistency matrix `A` is summarized by its
//! leading eigenvector `v*` as `s = v*ᵀ A v* / n`, clusters are averaged,
//! and the loss is `-log(s_avg)`. Rigid flows score exactly 1.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbscan::ClusterSet;
use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud};
use crate::scalar::Real;
use crate::tape::{adjacency_matrix, power_iterate, rayleigh_score, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiBodyConfig {
    /// Distance-preservation margin in meters.
    pub d_thr: f64,
    pub power_iters: usize,
    /// Clusters with fewer members are ignored.
    pub min_cluster_size: usize,
    /// Larger clusters are uniformly subsampled to this many points.
    pub max_cluster_points: usize,
    /// Lower clamp on `s_avg` before the logarithm.
    pub score_floor: f64,
    /// Treat `v*` as a constant when differentiating.
    pub stop_grad_eigvec: bool,
}

impl Default for MultiBodyConfig {
    fn default() -> Self {
        Self {
            d_thr: 0.03,
            power_iters: 10,
            min_cluster_size: 2,
            max_cluster_points: 2048,
            score_floor: 1e-12,
            stop_grad_eigvec: true,
        }
    }
}

impl MultiBodyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_thr > 0.0) {
            return Err(Error::param("d_thr", format!("must be positive, got {}", self.d_thr)));
        }
        if self.power_iters == 0 {
            return Err(Error::param("power_iters", "must be at least 1"));
        }
        if self.min_cluster_size == 0 {
            return Err(Error::param("min_cluster_size", "must be at least 1"));
        }
        if self.max_cluster_points < 2 {
            return Err(Error::param("max_cluster_points", "must be at least 2"));
        }
        if !(self.score_floor > 0.0) {
            return Err(Error::param("score_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Pairwise consistency graph of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGraph<T> {
    pub points: Array2<T>,
    pub flows: Array2<T>,
    pub d_thr: T,
    pub a: Array2<T>,
}

impl<T: Real> ConsistencyGraph<T> {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
}

/// Builds `A[i,j] = [1 - (d_ij - d̂_ij)² / d_thr²]₊` for one cluster.
pub fn adjacency<T: Real>(
    points: &PointCloud<T>,
    flow: &FlowField<T>,
    d_thr: T,
) -> Result<ConsistencyGraph<T>> {
    flow.check_len(points.len())?;
    if let Some(index) = flow.vectors().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFlow { index });
    }
    if !(d_thr > T::zero()) {
        return Err(Error::param("d_thr", "must be positive"));
    }
    let p = points.to_array();
    let f = flow.to_array();
    let a = adjacency_matrix(&p, &f, d_thr);
    Ok(ConsistencyGraph {
        points: p,
        flows: f,
        d_thr,
        a,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralScore<T> {
    pub v_star: Vec<T>,
    pub s: T,
    pub iterations: usize,
}

/// `v_{k+1} = A v_k / ‖A v_k‖` from `v_0 = 1`, as an `n×1` column.
pub fn power_iteration<T: Real>(a: &Array2<T>, iterations: usize) -> Result<Array2<T>> {
    let v = power_iterate(a, iterations)?;
    Ok(Array2::from_shape_vec((v.len(), 1), v).expect("column shape"))
}

/// `(1/n) v*ᵀ A v*` with `v*` from `power_iters` steps of power iteration.
pub fn spectral_score<T: Real>(
    graph: &ConsistencyGraph<T>,
    cfg: &MultiBodyConfig,
) -> Result<SpectralScore<T>> {
    let v = power_iterate(&graph.a, cfg.power_iters)?;
    let s = rayleigh_score(&graph.a, &v);
    Ok(SpectralScore {
        v_star: v,
        s,
        iterations: cfg.power_iters,
    })
}

/// Mean of all entries of `A`: `1ᵀ A 1 / n²`. The non-robust score.
pub fn mean_score<T: Real>(a: &Array2<T>) -> T {
    a.sum() / T::lit((a.nrows() * a.nrows()) as f64)
}

/// Records the spectral score of `a` (an `n×n` node), differentiating
/// through every power-iteration step.
fn record_spectral_unrolled<T: Real>(tape: &mut Tape<T>, a: Var, cfg: &MultiBodyConfig) -> Result<Var> {
    let n = tape.value(a).nrows();
    let mut v = tape.constant(Array2::from_elem((n, 1), T::one()));
    for step in 0..cfg.power_iters {
        let u = tape.matvec(a, v)?;
        let sq = tape.square(u);
        let ss = tape.sum(sq);
        let norm = tape.sqrt(ss);
        if !(tape.scalar(norm) > T::zero()) {
            return Err(Error::DegeneratePowerIteration { step });
        }
        v = tape.div_scalar(u, norm)?;
    }
    let av = tape.matvec(a, v)?;
    let vav = tape.mul(v, av)?;
    let q = tape.sum(vav);
    Ok(tape.scale(q, T::one() / T::lit(n as f64)))
}

/// Indices used for one cluster's graph: all members, or a seeded uniform
/// subsample (kept in ascending order) when the cluster exceeds the cap.
pub fn cluster_sample(members: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if members.len() <= cap {
        return members.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, members.len(), cap)
        .into_iter()
        .map(|k| members[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Clusters that take part in the regularizer, by id order.
pub fn active_clusters(clusters: &ClusterSet, cfg: &MultiBodyConfig) -> Vec<Vec<usize>> {
    clusters
        .members()
        .into_iter()
        .filter(|m| m.len() >= cfg.min_cluster_size.max(1))
        .collect()
}

/// Records `L_MB` for flow node `flow` (`N×3`) defined on `cloud`.
///
/// Returns `None` when no cluster qualifies; the regularizer is then inert.
/// `round` reseeds the subsampling of oversized clusters.
pub fn record_multibody<T: Real>(
    tape: &mut Tape<T>,
    cloud: &PointCloud<T>,
    flow: Var,
    clusters: &ClusterSet,
    cfg: &MultiBodyConfig,
    round: u64,
) -> Result<Option<Var>> {
    cfg.validate()?;
    let n = tape.value(flow).nrows();
    if n != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            actual: n,
        });
    }
    if clusters.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            actual: clusters.len(),
        });
    }
    let active = active_clusters(clusters, cfg);
    if active.is_empty() {
        return Ok(None);
    }
    let points = cloud.to_array();
    let d_thr = T::lit(cfg.d_thr);
    let mut total: Option<Var> = None;
    for (c, members) in active.iter().enumerate() {
        let seed = round.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c as u64;
        let rows = cluster_sample(members, cfg.max_cluster_points, seed);
        let sub_points = points.select(ndarray::Axis(0), &rows);
        let sub_flow = tape.gather(flow, rows)?;
        let s = if cfg.stop_grad_eigvec {
            tape.spectral_fixed(sub_points, sub_flow, d_thr, cfg.power_iters)?
        } else {
            let a = tape.adjacency(sub_points, sub_flow, d_thr)?;
            record_spectral_unrolled(tape, a, cfg)?
        };
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let total = total.expect("at least one active cluster");
    let avg = tape.scale(total, T::one() / T::lit(active.len() as f64));
    let floored = tape.max_const(avg, T::lit(cfg.score_floor));
    let log = tape.log(floored);
    Ok(Some(tape.scale(log, -T::one())))
}

/// Value of `L_MB` for a flow on `cloud` (zero when no cluster qualifies).
pub fn multibody_loss<T: Real>(
    cloud: &PointCloud<T>,
    flow: &FlowField<T>,
    clusters: &ClusterSet,
    cfg: &MultiBodyConfig,
) -> Result<T> {
    flow.check_len(cloud.len())?;
    let mut tape = Tape::new(0);
    let f = tape.constant(flow.to_array());
    Ok(record_multibody(&mut tape, cloud, f, clusters, cfg, 0)?
        .map(|v| tape.scalar(v))
        .unwrap_or_else(T::zero))
}

/// Per-cluster spectral scores (by active-cluster order) of a flow.
pub fn cluster_scores<T: Real>(
    cloud: &PointCloud<T>,
    flow: &FlowField<T>,
    clusters: &ClusterSet,
    cfg: &MultiBodyConfig,
) -> Result<Vec<T>> {
    flow.check_len(cloud.len())?;
    active_clusters(clusters, cfg)
        .iter()
        .map(|m| {
            let rows = cluster_sample(m, cfg.max_cluster_points, 0);
            let g = adjacency(&cloud.select(&rows)?, &flow.select(&rows), T::lit(cfg.d_thr))?;
            spectral_score(&g, cfg).map(|s| s.s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbscan::DbscanParams;
    use crate::geometry::{Point3, RigidTransform};
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn graph_from(a: Array2<f64>) -> ConsistencyGraph<f64> {
        let n = a.nrows();
        ConsistencyGraph {
            points: Array2::zeros((n, 3)),
            flows: Array2::zeros((n, 3)),
            d_thr: 1.0,
            a,
        }
    }

    #[test]
    fn all_ones_scores_one() {
        let s = spectral_score(&graph_from(Array2::ones((4, 4))), &MultiBodyConfig::default()).unwrap();
        assert!((s.s - 1.0).abs() < 1e-15);
        for v in &s.v_star {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let s = spectral_score(
            &graph_from(array![[1.0, 0.5], [0.5, 1.0]]),
            &MultiBodyConfig::default(),
        )
        .unwrap();
        assert!((s.s - 0.75).abs() < 1e-15);
        let norm: f64 = s.v_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rigid_flow_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Point3<f64>> = (0..30)
            .map(|_| Point3::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let t = RigidTransform::random(&mut rng, 2.0);
        let flow = FlowField::from_transform(&t, &cloud);
        let g = adjacency(&cloud, &flow, 0.03).unwrap();
        assert!(g.a.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        let clusters = ClusterSet::single(30);
        assert!(multibody_loss(&cloud, &flow, &clusters, &MultiBodyConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn inert_when_everything_is_noise() {
        let cloud = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)]).unwrap();
        let flow = FlowField::new(vec![Point3::new(1.0, 0.0, 0.0), Point3::zero()]).unwrap();
        let clusters = ClusterSet::from_labels(vec![-1, -1], DbscanParams::default()).unwrap();
        assert_eq!(multibody_loss(&cloud, &flow, &clusters, &MultiBodyConfig::default()).unwrap(), 0.0);
        let mut tape = Tape::new(0);
        let f = tape.constant(flow.to_array());
        assert!(record_multibody(&mut tape, &cloud, f, &clusters, &MultiBodyConfig::default(), 0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn two_cluster_average_then_log() {
        // cluster 0 moves rigidly (score 1); cluster 1 has A = [[1, .5], [.5, 1]] (score .75)
        let cloud = PointCloud::new(vec![
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(11.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
        ])
        .unwrap();
        let flow = FlowField::new(vec![
            Point3::new(0.2, 0.0, 0.0),
            Point3::new(0.2, 0.0, 0.0),
            Point3::zero(),
            Point3::new(0.03 * 0.5f64.sqrt(), 0.0, 0.0),
        ])
        .unwrap();
        let clusters = ClusterSet::from_labels(vec![0, 0, 1, 1], DbscanParams::default()).unwrap();
        let cfg = MultiBodyConfig::default();
        let scores = cluster_scores(&cloud, &flow, &clusters, &cfg).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-12);
        assert!((scores[1] - 0.75).abs() < 1e-12);
        let l = multibody_loss(&cloud, &flow, &clusters, &cfg).unwrap();
        assert!((l + 0.875f64.ln()).abs() < 1e-12);
        assert!((l - 0.1335).abs() < 1e-4);
    }

    #[test]
    fn small_clusters_are_skipped() {
        let cloud = PointCloud::new(vec![Point3::<f64>::zero(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let flow = FlowField::new(vec![Point3::zero(), Point3::new(0.5, 0.0, 0.0)]).unwrap();
        let clusters = ClusterSet::from_labels(vec![0, 1], DbscanParams::default()).unwrap();
        assert_eq!(multibody_loss(&cloud, &flow, &clusters, &MultiBodyConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn subsample_is_seeded_and_sorted() {
        let members: Vec<usize> = (0..100).map(|i| i * 3).collect();
        let a = cluster_sample(&members, 10, 7);
        assert_eq!(a, cluster_sample(&members, 10, 7));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|i| i % 3 == 0));
        assert_eq!(cluster_sample(&members, 200, 7), members);
    }

    #[test]
    fn config_validation() {
        let bad = MultiBodyConfig {
            d_thr: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MultiBodyConfig {
            power_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
