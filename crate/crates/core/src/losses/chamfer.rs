//! Truncated Chamfer distance between a projected source and a target cloud.
//!
//! Nearest-neighbour correspondences are fixed for one evaluation: the
//! gradient is that of the squared distance to the currently nearest point.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Point3};
use crate::scalar::Real;
use crate::spatial::{SpatialIndex, DEFAULT_LEAF_SIZE};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChamferConfig {
    /// Squared distances are clamped at `truncation²` (meters).
    pub truncation: f64,
    pub bidirectional: bool,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self {
            truncation: 2.0,
            bidirectional: true,
        }
    }
}

impl ChamferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.truncation > 0.0) {
            return Err(Error::param(
                "truncation",
                format!("must be positive, got {}", self.truncation),
            ));
        }
        Ok(())
    }
}

fn nearest_rows<T: Real>(index: &SpatialIndex<T>, queries: &[Point3<T>]) -> Result<Vec<usize>> {
    queries
        .iter()
        .map(|q| index.nearest_squared(q).map(|(i, _)| i))
        .collect()
}

/// Records the truncated Chamfer loss of the `N×3` node `projected` against
/// `target` and returns the scalar node.
pub fn record_chamfer<T: Real>(
    tape: &mut Tape<T>,
    projected: Var,
    target: &PointCloud<T>,
    target_index: &SpatialIndex<T>,
    cfg: &ChamferConfig,
) -> Result<Var> {
    cfg.validate()?;
    let proj_value = tape.value(projected).clone();
    if proj_value.nrows() == 0 {
        return Err(Error::EmptyCloud);
    }
    if target_index.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: target_index.len(),
        });
    }
    let cap = T::lit(cfg.truncation * cfg.truncation);
    let proj_points: Vec<Point3<T>> = proj_value
        .rows()
        .into_iter()
        .map(|r| Point3::new(r[0], r[1], r[2]))
        .collect();
    let target_array = target.to_array();

    let fwd_idx = nearest_rows(target_index, &proj_points)?;
    let matched = tape.constant(target_array.select(Axis(0), &fwd_idx));
    let diff = tape.sub(projected, matched)?;
    let forward = clamped_mean(tape, diff, cap);
    if !cfg.bidirectional {
        return Ok(forward);
    }

    let proj_index = SpatialIndex::new(&proj_points, DEFAULT_LEAF_SIZE)?;
    let bwd_idx = nearest_rows(&proj_index, target.points())?;
    let gathered = tape.gather(projected, bwd_idx)?;
    let fixed = tape.constant(target_array);
    let diff = tape.sub(gathered, fixed)?;
    let backward = clamped_mean(tape, diff, cap);
    tape.add(forward, backward)
}

fn clamped_mean<T: Real>(tape: &mut Tape<T>, diff: Var, cap: T) -> Var {
    let sq = tape.square(diff);
    let d2 = tape.row_sum(sq);
    let clamped = tape.min_const(d2, cap);
    tape.mean(clamped)
}

/// Value of the truncated Chamfer loss between two clouds.
pub fn truncated_chamfer<T: Real>(
    projected: &PointCloud<T>,
    target: &PointCloud<T>,
    cfg: &ChamferConfig,
    target_index: &SpatialIndex<T>,
) -> Result<T> {
    let mut tape = Tape::new(0);
    let p = tape.constant(projected.to_array());
    let loss = record_chamfer(&mut tape, p, target, target_index, cfg)?;
    Ok(tape.scalar(loss))
}
