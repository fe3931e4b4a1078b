//! Test-time optimization of one source→target pair.
//!
//! DBSCAN runs once on the source before any iteration; the network is
//! then fitted with Adam on the total loss, with early stopping on the best
//! total loss and best-iterate return.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dbscan::{dbscan, ClusterSet, DbscanParams};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud};
use crate::losses::{total_loss_and_grad, ChamferConfig, LossTerms, LossWeights, MultiBodyConfig, PairProblem};
use crate::prior::{init_prior, Activation, MlpArchitecture, NeuralPrior};
use crate::scalar::Real;
use crate::spatial::{build_index, DEFAULT_LEAF_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    lr: T,
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, learning_rate: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr: T::lit(learning_rate),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let eps = T::lit(self.cfg.epsilon);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Network shape for the scene-flow prior (input and output are 3D).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let a = MlpArchitecture::default();
        Self {
            hidden_width: a.hidden_width,
            hidden_layers: a.hidden_layers,
            activation: a.activation,
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, input_dim: usize) -> MlpArchitecture {
        MlpArchitecture {
            input_dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: self.activation,
            output_dim: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub omega: f64,
    pub enable_rigidity: bool,
    pub seed: u64,
    pub adam: AdamConfig,
    pub network: NetworkConfig,
    pub chamfer: ChamferConfig,
    pub multibody: MultiBodyConfig,
    pub dbscan: DbscanParams,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            max_iters: 1000,
            patience: 100,
            omega: 1.0,
            enable_rigidity: true,
            seed: 0,
            adam: AdamConfig::default(),
            network: NetworkConfig::default(),
            chamfer: ChamferConfig::default(),
            multibody: MultiBodyConfig::default(),
            dbscan: DbscanParams::default(),
        }
    }
}

impl SolveConfig {
    /// The Chamfer-only objective.
    pub fn baseline(mut self) -> Self {
        self.enable_rigidity = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if self.patience > self.max_iters {
            return Err(Error::param("patience", "must not exceed max_iters"));
        }
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(Error::param("omega", "must be finite and non-negative"));
        }
        self.network.architecture(3).validate()?;
        self.chamfer.validate()?;
        self.multibody.validate()?;
        self.dbscan.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            chamfer: self.chamfer,
            multibody: self.multibody,
            omega: if self.enable_rigidity { self.omega } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport<T> {
    pub flow: FlowField<T>,
    /// Network at the best iterate.
    pub net: NeuralPrior<T>,
    /// Loss terms per iteration, evaluated before that iteration's update.
    pub trace: Vec<LossTerms<T>>,
    pub iterations: usize,
    pub best_iter: usize,
    pub cluster_count: usize,
    pub clusters: Option<ClusterSet>,
    pub cluster_seconds: f64,
    pub wall_seconds: f64,
}

/// JSON-facing summary of a [`SolveReport`].
#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub best_iter: usize,
    pub best_loss: f64,
    pub final_loss: f64,
    pub cluster_count: usize,
    pub cluster_seconds: f64,
    pub wall_seconds: f64,
    pub trace: Vec<LossTerms<f64>>,
}

impl<T: Real> SolveReport<T> {
    pub fn best_loss(&self) -> T {
        self.trace[self.best_iter].total
    }

    pub fn summary(&self) -> SolveSummary {
        let cast = |t: &LossTerms<T>| LossTerms {
            total: t.total.as_f64(),
            chamfer: t.chamfer.as_f64(),
            multibody: t.multibody.as_f64(),
        };
        SolveSummary {
            iterations: self.iterations,
            best_iter: self.best_iter,
            best_loss: self.best_loss().as_f64(),
            final_loss: self.trace.last().map(|t| t.total.as_f64()).unwrap_or(f64::NAN),
            cluster_count: self.cluster_count,
            cluster_seconds: self.cluster_seconds,
            wall_seconds: self.wall_seconds,
            trace: self.trace.iter().map(cast).collect(),
        }
    }
}

/// Clusters the source once; `None` when the regularizer is disabled.
pub fn source_clusters<T: Real>(source: &PointCloud<T>, cfg: &SolveConfig) -> Result<Option<ClusterSet>> {
    if !cfg.enable_rigidity {
        return Ok(None);
    }
    dbscan(source, cfg.dbscan.eps, cfg.dbscan.min_points).map(Some)
}

/// Fits the flow from `source` to `target`.
pub fn solve_pair<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    cfg: &SolveConfig,
) -> Result<SolveReport<T>> {
    let start = Instant::now();
    let clusters = source_clusters(source, cfg)?;
    let cluster_seconds = start.elapsed().as_secs_f64();
    solve_pair_with_clusters(source, target, clusters, cfg, start, cluster_seconds)
}

/// As [`solve_pair`], with externally supplied clusters.
pub fn solve_pair_with_clusters<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    clusters: Option<ClusterSet>,
    cfg: &SolveConfig,
    start: Instant,
    cluster_seconds: f64,
) -> Result<SolveReport<T>> {
    cfg.validate()?;
    let target_index = build_index(target, DEFAULT_LEAF_SIZE)?;
    let mut net = init_prior::<T>(cfg.network.architecture(3), cfg.seed)?;
    let problem = PairProblem {
        source,
        target,
        target_index: &target_index,
        clusters: clusters.as_ref(),
    };
    let weights = cfg.weights();
    let mut adam = Adam::new(net.params().len(), cfg.learning_rate, cfg.adam);
    let mut trace = Vec::new();
    let mut best = (T::infinity(), net.params().to_vec(), 0usize);

    for iteration in 0..cfg.max_iters {
        let (terms, grad) = total_loss_and_grad(&net, &problem, &weights, iteration as u64)?;
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration });
        }
        trace.push(terms);
        if terms.total < best.0 {
            best = (terms.total, net.params().to_vec(), iteration);
        } else if iteration - best.2 >= cfg.patience {
            break;
        }
        adam.step(net.params_mut(), &grad);
    }

    net.params_mut().copy_from_slice(&best.1);
    let flow = net.evaluate_flow(source)?;
    Ok(SolveReport {
        flow,
        net,
        iterations: trace.len(),
        trace,
        best_iter: best.2,
        cluster_count: clusters.as_ref().map_or(0, ClusterSet::cluster_count),
        clusters,
        cluster_seconds,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Flow of a fitted network at arbitrary query points.
pub fn evaluate_field<T: Real>(net: &NeuralPrior<T>, query: &PointCloud<T>) -> Result<FlowField<T>> {
    net.evaluate_flow(query)
}
