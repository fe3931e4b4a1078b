//! Long-term point trajectories.
//!
//! Two routes are provided: chaining pairwise flow fields with forward Euler
//! steps evaluated at the propagated positions, and a single time-conditioned
//! field `Φ(p, t, t̂)` fitted over the whole sequence.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbscan::{dbscan, ClusterSet};
use crate::error::{Error, Result};
use crate::geometry::{project_flow, FlowField, Point3, PointCloud};
use crate::losses::{record_chamfer, record_multibody};
use crate::optim::{solve_pair, Adam, NetworkConfig, SolveConfig, SolveReport};
use crate::prior::{init_prior, NeuralPrior};
use crate::scalar::Real;
use crate::spatial::{build_index, SpatialIndex, DEFAULT_LEAF_SIZE};
use crate::tape::{Tape, Var};

/// Positions of one tracked point at frames `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    positions: Vec<Point3<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(positions: Vec<Point3<T>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { positions })
    }

    pub fn frame_count(&self) -> usize {
        self.positions.len()
    }

    /// Position at 1-based `frame`.
    pub fn position(&self, frame: usize) -> Point3<T> {
        self.positions[frame - 1]
    }

    pub fn positions(&self) -> &[Point3<T>] {
        &self.positions
    }
}

/// Transposes frame-major position sets into per-point trajectories.
pub fn trajectories_from_frames<T: Real>(frames: &[Vec<Point3<T>>]) -> Result<Vec<Trajectory<T>>> {
    let n = frames.first().map_or(0, Vec::len);
    if let Some(bad) = frames.iter().find(|f| f.len() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: bad.len(),
        });
    }
    (0..n)
        .map(|i| Trajectory::new(frames.iter().map(|f| f[i]).collect()))
        .collect()
}

/// Forward-Euler chaining: `x_{t+1} = x_t + field_t(x_t)` from `x_1 = seeds`.
///
/// `field(t, x)` returns the flow of step `t` (0-based) at positions `x`.
pub fn integrate_fields<T, F>(
    seeds: &PointCloud<T>,
    steps: usize,
    mut field: F,
) -> Result<Vec<Trajectory<T>>>
where
    T: Real,
    F: FnMut(usize, &PointCloud<T>) -> Result<FlowField<T>>,
{
    let mut frames = vec![seeds.points().to_vec()];
    let mut x = seeds.clone();
    for t in 0..steps {
        let flow = field(t, &x).map_err(|e| Error::PairFailed {
            index: t,
            source: Box::new(e),
        })?;
        x = project_flow(&x, &flow)?;
        frames.push(x.points().to_vec());
    }
    trajectories_from_frames(&frames)
}

#[derive(Debug, Clone)]
pub struct EulerResult<T> {
    pub trajectories: Vec<Trajectory<T>>,
    pub reports: Vec<SolveReport<T>>,
}

/// Solves every consecutive pair on the sensor frames, then integrates the
/// fitted fields from the first frame's points.
pub fn integrate_euler<T: Real>(sequence: &[PointCloud<T>], cfg: &SolveConfig) -> Result<EulerResult<T>> {
    if sequence.len() < 2 {
        return Err(Error::param("sequence", "need at least 2 frames"));
    }
    let mut reports = Vec::with_capacity(sequence.len() - 1);
    let trajectories = integrate_fields(&sequence[0], sequence.len() - 1, |t, x| {
        let report = solve_pair(&sequence[t], &sequence[t + 1], cfg)?;
        let flow = report.net.evaluate_flow(x)?;
        reports.push(report);
        Ok(flow)
    })?;
    Ok(EulerResult {
        trajectories,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Cosine frequencies per time stamp.
    pub embed_dim: usize,
    /// Multiplier on the frequency ladder `π·k`, `k = 1..=embed_dim`.
    pub freq_scale: f64,
    pub cycle_weight: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub network: NetworkConfig,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            freq_scale: 1.0,
            cycle_weight: 1.0,
            max_iters: 2000,
            learning_rate: 0.003,
            network: NetworkConfig::default(),
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::param("embed_dim", "must be at least 1"));
        }
        if !(self.freq_scale > 0.0) {
            return Err(Error::param("freq_scale", "must be positive"));
        }
        if !(self.cycle_weight >= 0.0) {
            return Err(Error::param("cycle_weight", "must be non-negative"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Time-conditioned motion field `Φ(p, t, t̂)`.
#[derive(Debug, Clone)]
pub struct TrajectoryField<T> {
    net: NeuralPrior<T>,
    frames: usize,
    embed_dim: usize,
    freq_scale: f64,
}

impl<T: Real> TrajectoryField<T> {
    pub fn new(net: NeuralPrior<T>, frames: usize, embed_dim: usize, freq_scale: f64) -> Result<Self> {
        if frames < 2 {
            return Err(Error::param("frames", "need at least 2 frames"));
        }
        let want = 3 + 2 * embed_dim;
        if net.architecture().input_dim != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                actual: net.architecture().input_dim,
            });
        }
        Ok(Self {
            net,
            frames,
            embed_dim,
            freq_scale,
        })
    }

    pub fn net(&self) -> &NeuralPrior<T> {
        &self.net
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 1.0 && t <= self.frames as f64) {
            return Err(Error::TimeOutOfRange {
                time: t,
                frames: self.frames,
            });
        }
        Ok(())
    }

    /// Cosine encoding `cos(π·k·s·τ)` of `τ = (t-1)/(T-1)`.
    pub fn embed(&self, t: f64) -> Vec<T> {
        time_embedding(t, self.frames, self.embed_dim, self.freq_scale)
    }

    fn embedding_rows(&self, n: usize, t: f64, t_hat: f64) -> Array2<T> {
        let mut e = self.embed(t);
        e.extend(self.embed(t_hat));
        Array2::from_shape_fn((n, e.len()), |(_, k)| e[k])
    }

    /// Displacement moving `p` (observed at `t`) to its position at `t_hat`.
    pub fn query(&self, p: &Point3<T>, t: f64, t_hat: f64) -> Result<Point3<T>> {
        let cloud = PointCloud::new(vec![*p])?;
        Ok(self.query_cloud(&cloud, t, t_hat)?[0])
    }

    pub fn query_cloud(&self, cloud: &PointCloud<T>, t: f64, t_hat: f64) -> Result<FlowField<T>> {
        self.check_time(t)?;
        self.check_time(t_hat)?;
        let x = ndarray::concatenate(
            ndarray::Axis(1),
            &[cloud.to_array().view(), self.embedding_rows(cloud.len(), t, t_hat).view()],
        )
        .expect("row counts agree");
        FlowField::from_array(&self.net.forward(x.view())?)
    }

    /// Records `Φ(x, t, t̂)` for an `N×3` node `x`.
    fn record(&self, tape: &mut Tape<T>, x: Var, t: f64, t_hat: f64) -> Result<Var> {
        let n = tape.value(x).nrows();
        let e = tape.constant(self.embedding_rows(n, t, t_hat));
        let input = tape.concat_cols(x, e)?;
        self.net.record(tape, input)
    }

    /// Mean squared round-trip error of `cloud` sent `t → x → t`.
    pub fn round_trip_residual(&self, cloud: &PointCloud<T>, t: f64, x: f64) -> Result<T> {
        let there = project_flow(cloud, &self.query_cloud(cloud, t, x)?)?;
        let back = project_flow(&there, &self.query_cloud(&there, x, t)?)?;
        let sum: T = cloud
            .points()
            .iter()
            .zip(back.points())
            .map(|(a, b)| a.distance_squared(b))
            .sum();
        Ok(sum / T::lit(cloud.len() as f64))
    }

    /// Trajectories of `seeds` (observed at frame `from`) over all frames.
    pub fn trajectories(&self, seeds: &PointCloud<T>, from: usize) -> Result<Vec<Trajectory<T>>> {
        let frames = (1..=self.frames)
            .map(|k| {
                if k == from {
                    Ok(seeds.points().to_vec())
                } else {
                    let f = self.query_cloud(seeds, from as f64, k as f64)?;
                    Ok(project_flow(seeds, &f)?.into_points())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        trajectories_from_frames(&frames)
    }
}

pub fn time_embedding<T: Real>(t: f64, frames: usize, embed_dim: usize, freq_scale: f64) -> Vec<T> {
    let tau = (t - 1.0) / (frames.max(2) - 1) as f64;
    (1..=embed_dim)
        .map(|k| T::lit((std::f64::consts::PI * k as f64 * freq_scale * tau).cos()))
        .collect()
}

/// Per-step loss values of the trajectory-field fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldLossTerms {
    pub total: f64,
    pub chamfer: f64,
    pub cycle: f64,
    pub multibody: f64,
}

#[derive(Debug, Clone)]
pub struct FieldReport<T> {
    pub field: TrajectoryField<T>,
    pub trace: Vec<FieldLossTerms>,
    /// Mean cycle loss over the last tenth of the fit.
    pub final_cycle: f64,
    pub wall_seconds: f64,
}

/// Fits `Φ(p, t, t̂)` to a sequence.
///
/// Each step draws a source frame `t` and a time `x` uniformly; Chamfer
/// terms tie `t` to its neighbours `t ± 1`, the cycle term sends `P^t` to
/// `x` and back, and the rigidity term scores the `t → x` flow on frame
/// `t`'s clusters (computed once, up front). `solve.omega`,
/// `solve.enable_rigidity`, `solve.chamfer`, `solve.multibody`,
/// `solve.dbscan` and `solve.seed` apply.
pub fn fit_trajectory_field<T: Real>(
    sequence: &[PointCloud<T>],
    solve: &SolveConfig,
    cfg: &TrajectoryConfig,
) -> Result<FieldReport<T>> {
    let start = std::time::Instant::now();
    if sequence.len() < 2 {
        return Err(Error::param("sequence", "need at least 2 frames"));
    }
    solve.validate()?;
    cfg.validate()?;
    let frames = sequence.len();
    let arch = cfg.network.architecture(3 + 2 * cfg.embed_dim);
    let net = init_prior::<T>(arch, solve.seed)?;
    let mut field = TrajectoryField::new(net, frames, cfg.embed_dim, cfg.freq_scale)?;
    let indices: Vec<SpatialIndex<T>> = sequence
        .iter()
        .map(|c| build_index(c, DEFAULT_LEAF_SIZE))
        .collect::<Result<_>>()?;
    let weights = solve.weights();
    let clusters: Vec<Option<ClusterSet>> = sequence
        .iter()
        .map(|c| {
            if weights.omega > 0.0 {
                dbscan(c, solve.dbscan.eps, solve.dbscan.min_points).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(solve.seed ^ 0x7452_414A);
    let mut adam = Adam::new(field.net.params().len(), cfg.learning_rate, solve.adam);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for iteration in 0..cfg.max_iters {
        let t = rng.gen_range(0..frames);
        let x_time = rng.gen_range(1.0..=frames as f64);
        let tf = (t + 1) as f64;
        let cloud = &sequence[t];
        let mut tape = Tape::new(field.net.params().len());
        let src = tape.constant(cloud.to_array());

        let mut chamfer_terms = Vec::new();
        for nb in [t.checked_sub(1), Some(t + 1).filter(|&k| k < frames)]
            .into_iter()
            .flatten()
        {
            let flow = field.record(&mut tape, src, tf, (nb + 1) as f64)?;
            let moved = tape.add(src, flow)?;
            chamfer_terms.push(record_chamfer(
                &mut tape,
                moved,
                &sequence[nb],
                &indices[nb],
                &solve.chamfer,
            )?);
        }
        let mut chamfer = chamfer_terms[0];
        for &c in &chamfer_terms[1..] {
            chamfer = tape.add(chamfer, c)?;
        }
        let chamfer = tape.scale(chamfer, T::one() / T::lit(chamfer_terms.len() as f64));

        let there_flow = field.record(&mut tape, src, tf, x_time)?;
        let there = tape.add(src, there_flow)?;
        let back_flow = field.record(&mut tape, there, x_time, tf)?;
        let back = tape.add(there, back_flow)?;
        let err = tape.sub(back, src)?;
        let sq = tape.square(err);
        let per_point = tape.row_sum(sq);
        let cycle = tape.mean(per_point);

        let weighted_cycle = tape.scale(cycle, T::lit(cfg.cycle_weight));
        let mut total = tape.add(chamfer, weighted_cycle)?;
        let mut mb_value = 0.0;
        if let Some(c) = &clusters[t] {
            if let Some(mb) = record_multibody(
                &mut tape,
                cloud,
                there_flow,
                c,
                &weights.multibody,
                iteration as u64,
            )? {
                mb_value = tape.scalar(mb).as_f64();
                let w = tape.scale(mb, T::lit(weights.omega));
                total = tape.add(total, w)?;
            }
        }
        let terms = FieldLossTerms {
            total: tape.scalar(total).as_f64(),
            chamfer: tape.scalar(chamfer).as_f64(),
            cycle: tape.scalar(cycle).as_f64(),
            multibody: mb_value,
        };
        if !terms.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grad = tape.backward(total)?.into_params();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        adam.step(field.net.params_mut(), &grad);
        trace.push(terms);
    }
    let tail = (trace.len() / 10).max(1);
    let final_cycle = trace[trace.len() - tail..].iter().map(|t| t.cycle).sum::<f64>() / tail as f64;
    Ok(FieldReport {
        field,
        trace,
        final_cycle,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Displacement query `Φ(p, t, t̂)` on a fitted field.
pub fn query_field<T: Real>(field: &TrajectoryField<T>, p: &Point3<T>, t: f64, t_hat: f64) -> Result<Point3<T>> {
    field.query(p, t, t_hat)
}
