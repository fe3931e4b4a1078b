//! Deterministic DBSCAN over Euclidean space.
//!
//! Points are visited in ascending index order and clusters are expanded
//! breadth-first from ascending neighbour lists, so a border point reachable
//! from two clusters always joins the one discovered first.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::scalar::Real;
use crate::spatial::{SpatialIndex, DEFAULT_LEAF_SIZE};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    /// Neighbourhood radius in meters.
    pub eps: f64,
    /// Neighbourhood size (the point itself included) that makes a core point.
    pub min_points: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.8,
            min_points: 30,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::param("eps", format!("must be positive, got {}", self.eps)));
        }
        if self.min_points == 0 {
            return Err(Error::param("min_points", "must be at least 1"));
        }
        Ok(())
    }
}

/// Cluster labels for one cloud: `NOISE` or an id in `0..count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    labels: Vec<i32>,
    count: usize,
    params: DbscanParams,
}

impl ClusterSet {
    /// Wraps externally produced labels (e.g. ground-truth body ids).
    pub fn from_labels(labels: Vec<i32>, params: DbscanParams) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(NOISE);
        let count = if max < 0 { 0 } else { max as usize + 1 };
        let mut seen = vec![false; count];
        for (i, &l) in labels.iter().enumerate() {
            if l < NOISE {
                return Err(Error::param("labels", format!("label {l} at index {i}")));
            }
            if l >= 0 {
                seen[l as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::param(
                "labels",
                format!("cluster id {missing} has no members"),
            ));
        }
        Ok(Self {
            labels,
            count,
            params,
        })
    }

    /// Every point in one cluster.
    pub fn single(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            count: usize::from(n > 0),
            params: DbscanParams {
                eps: f64::INFINITY,
                min_points: 1,
            },
        }
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.count
    }

    pub fn params(&self) -> DbscanParams {
        self.params
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Member indices of every cluster, ascending within each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }
}

/// Clusters `cloud` with radius `eps` and core threshold `min_points`.
pub fn dbscan<T: Real>(cloud: &PointCloud<T>, eps: f64, min_points: usize) -> Result<ClusterSet> {
    let params = DbscanParams { eps, min_points };
    params.validate()?;
    let n = cloud.len();
    let index = SpatialIndex::new(cloud.points(), DEFAULT_LEAF_SIZE)?;
    let radius = T::lit(eps);
    let region = |i: usize| index.within_radius(&cloud[i], radius);

    const UNVISITED: i32 = -2;
    let mut labels = vec![UNVISITED; n];
    let mut count = 0i32;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != UNVISITED {
            continue;
        }
        let neighbours = region(i)?;
        if neighbours.len() < min_points {
            labels[i] = NOISE;
            continue;
        }
        let id = count;
        count += 1;
        labels[i] = id;
        queue.extend(neighbours);
        while let Some(j) = queue.pop_front() {
            match labels[j] {
                NOISE => labels[j] = id,
                UNVISITED => {
                    labels[j] = id;
                    let nj = region(j)?;
                    if nj.len() >= min_points {
                        queue.extend(nj.into_iter().filter(|&k| labels[k] < 0));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(ClusterSet {
        labels,
        count: count as usize,
        params,
    })
}
