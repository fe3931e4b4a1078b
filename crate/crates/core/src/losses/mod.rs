//! Loss terms of the scene flow objective: truncated Chamfer alignment plus
//! the weighted multi-body rigidity regularizer.

pub mod chamfer;
pub mod rigidity;

use serde::Serialize;

pub use chamfer::{record_chamfer, truncated_chamfer, ChamferConfig};
pub use rigidity::{
    adjacency, mean_score, multibody_loss, power_iteration, record_multibody, spectral_score,
    ConsistencyGraph, MultiBodyConfig, SpectralScore,
};

use crate::dbscan::ClusterSet;
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::prior::NeuralPrior;
use crate::scalar::Real;
use crate::spatial::SpatialIndex;
use crate::tape::{Tape, Var};

/// The fixed data of one source→target problem.
#[derive(Debug, Clone, Copy)]
pub struct PairProblem<'a, T> {
    pub source: &'a PointCloud<T>,
    pub target: &'a PointCloud<T>,
    pub target_index: &'a SpatialIndex<T>,
    /// `None` disables the regularizer regardless of `omega`.
    pub clusters: Option<&'a ClusterSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub chamfer: ChamferConfig,
    pub multibody: MultiBodyConfig,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            chamfer: ChamferConfig::default(),
            multibody: MultiBodyConfig::default(),
            omega: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms<T> {
    pub total: T,
    pub chamfer: T,
    pub multibody: T,
}

/// Records `L_CD(P1 + Φ(P1), P2) + ω·L_MB(P1, Φ(P1))` and returns the root
/// node with the individual term values.
pub fn record_total_loss<T: Real>(
    tape: &mut Tape<T>,
    net: &NeuralPrior<T>,
    problem: &PairProblem<'_, T>,
    weights: &LossWeights,
    round: u64,
) -> Result<(Var, LossTerms<T>)> {
    let flow = net.record_flow(tape, problem.source)?;
    let src = tape.constant(problem.source.to_array());
    let projected = tape.add(src, flow)?;
    let cd = record_chamfer(
        tape,
        projected,
        problem.target,
        problem.target_index,
        &weights.chamfer,
    )?;
    let chamfer = tape.scalar(cd);
    let mut terms = LossTerms {
        total: chamfer,
        chamfer,
        multibody: T::zero(),
    };
    let clusters = match problem.clusters {
        Some(c) if weights.omega != 0.0 => c,
        _ => return Ok((cd, terms)),
    };
    let Some(mb) = record_multibody(
        tape,
        problem.source,
        flow,
        clusters,
        &weights.multibody,
        round,
    )?
    else {
        return Ok((cd, terms));
    };
    terms.multibody = tape.scalar(mb);
    let weighted = tape.scale(mb, T::lit(weights.omega));
    let total = tape.add(cd, weighted)?;
    terms.total = tape.scalar(total);
    Ok((total, terms))
}

/// Value of the total loss for `net` on `problem`.
pub fn total_loss<T: Real>(
    net: &NeuralPrior<T>,
    problem: &PairProblem<'_, T>,
    weights: &LossWeights,
) -> Result<LossTerms<T>> {
    let mut tape = Tape::new(net.params().len());
    record_total_loss(&mut tape, net, problem, weights, 0).map(|(_, t)| t)
}

/// Total loss and its gradient with respect to the network parameters.
pub fn total_loss_and_grad<T: Real>(
    net: &NeuralPrior<T>,
    problem: &PairProblem<'_, T>,
    weights: &LossWeights,
    round: u64,
) -> Result<(LossTerms<T>, Vec<T>)> {
    let mut tape = Tape::new(net.params().len());
    let (root, terms) = record_total_loss(&mut tape, net, problem, weights, round)?;
    let grad = tape.backward(root)?.into_params();
    Ok((terms, grad))
}
