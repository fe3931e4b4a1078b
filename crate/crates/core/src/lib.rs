//! Multi-body rigid neural scene flow.
//!
//! A coordinate MLP is fitted at test time to map each source point to its
//! motion toward a target cloud. Alongside the truncated Chamfer alignment,
//! a regularizer scores every DBSCAN cluster by how well its predicted flow
//! preserves pairwise distances, pushing each cluster toward a rigid motion
//! without ever estimating per-body SE(3) parameters.
//!
//! The numeric code is generic over [`Real`] (`f32`/`f64`); the aliases at
//! the crate root fix it to `f64`, the working precision of the solver.

pub mod dbscan;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod scalar;
pub mod spatial;
pub mod sweep;
pub mod synth;
pub mod tape;
pub mod trajectory;

pub use dbscan::{dbscan, ClusterSet, DbscanParams, NOISE};
pub use error::{Error, Result};
pub use geometry::{apply_transform, project_flow};
pub use losses::{ChamferConfig, LossTerms, LossWeights, MultiBodyConfig};
pub use metrics::{flow_metrics, traj_metrics, FlowMetrics, TrajMetrics};
pub use optim::{evaluate_field, solve_pair, NetworkConfig, SolveConfig};
pub use prior::{init_prior, Activation, MlpArchitecture};
pub use scalar::Real;
pub use spatial::build_index;
pub use trajectory::{fit_trajectory_field, integrate_euler, TrajectoryConfig};

pub type Point3 = geometry::Point3<f64>;
pub type Vector3 = geometry::Vector3<f64>;
pub type PointCloud = geometry::PointCloud<f64>;
pub type FlowField = geometry::FlowField<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type SpatialIndex = spatial::SpatialIndex<f64>;
pub type NeuralPrior = prior::NeuralPrior<f64>;
pub type Tape = tape::Tape<f64>;
pub type ConsistencyGraph = losses::ConsistencyGraph<f64>;
pub type SpectralScore = losses::SpectralScore<f64>;
pub type SolveReport = optim::SolveReport<f64>;
pub type Trajectory = trajectory::Trajectory<f64>;
pub type TrajectoryField = trajectory::TrajectoryField<f64>;
pub type SyntheticScene = synth::SyntheticScene<f64>;

/// Single-precision aliases, matching the on-disk width.
pub mod f32 {
    pub type Point3 = crate::geometry::Point3<f32>;
    pub type Vector3 = crate::geometry::Vector3<f32>;
    pub type PointCloud = crate::geometry::PointCloud<f32>;
    pub type FlowField = crate::geometry::FlowField<f32>;
    pub type NeuralPrior = crate::prior::NeuralPrior<f32>;
    pub type SolveReport = crate::optim::SolveReport<f32>;
}
