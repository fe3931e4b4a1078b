//! k-d tree for exact nearest-neighbour and fixed-radius queries.
//!
//! Results are identical to a linear scan: distances are compared as exact
//! squared distances and ties go to the lowest point index.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::scalar::Real;

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SpatialIndex<T> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
    leaf_size: usize,
}

/// Builds a k-d tree over `cloud`.
pub fn build_index<T: Real>(cloud: &PointCloud<T>, leaf_size: usize) -> Result<SpatialIndex<T>> {
    SpatialIndex::new(cloud.points(), leaf_size)
}

impl<T: Real> SpatialIndex<T> {
    pub fn new(points: &[Point3<T>], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if leaf_size == 0 {
            return Err(Error::param("leaf_size", "must be positive"));
        }
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinitePoint { index });
        }
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        tree.build(0, points.len());
        Ok(tree)
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .expect("finite coordinates")
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for &i in &self.order[start..end] {
            let p = self.points[i];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| {
                (hi[a] - lo[a])
                    .partial_cmp(&(hi[b] - lo[b]))
                    .expect("finite extents")
                    .then(b.cmp(&a))
            })
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    /// Closest stored point as `(index, distance)`.
    pub fn nearest(&self, query: &Point3<T>) -> Result<(usize, T)> {
        let (i, d2) = self.nearest_squared(query)?;
        Ok((i, d2.sqrt()))
    }

    /// Closest stored point as `(index, squared distance)`.
    pub fn nearest_squared(&self, query: &Point3<T>) -> Result<(usize, T)> {
        if !query.is_finite() {
            return Err(Error::param("query", "non-finite coordinate"));
        }
        let mut best = (usize::MAX, T::infinity());
        self.nearest_in(0, query, &mut best);
        Ok(best)
    }

    fn nearest_in(&self, node: usize, q: &Point3<T>, best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = self.points[i].distance_squared(q);
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < T::zero() {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                // Equality still descends: an equidistant point with a lower
                // index may sit on the far side.
                if delta * delta <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// Indices of all points with `‖p - q‖ <= radius`, ascending.
    pub fn within_radius(&self, query: &Point3<T>, radius: T) -> Result<Vec<usize>> {
        if !query.is_finite() {
            return Err(Error::param("query", "non-finite coordinate"));
        }
        let mut out = Vec::new();
        self.radius_in(0, query, radius * radius, &mut out);
        out.sort_unstable();
        Ok(out)
    }

    fn radius_in(&self, node: usize, q: &Point3<T>, r2: T, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => out.extend(
                self.order[start..end]
                    .iter()
                    .copied()
                    .filter(|&i| self.points[i].distance_squared(q) <= r2),
            ),
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                if delta <= T::zero() || delta * delta <= r2 {
                    self.radius_in(left, q, r2, out);
                }
                if delta >= T::zero() || delta * delta <= r2 {
                    self.radius_in(right, q, r2, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scan(points: &[Point3<f64>], q: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = p.distance_squared(q);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                )
            })
            .collect()
    }

    #[test]
    fn single_point() {
        let idx = SpatialIndex::new(&[Point3::new(1.0, 2.0, 3.0)], 4).unwrap();
        assert_eq!(idx.nearest(&Point3::new(1.0, 2.0, 3.0)).unwrap(), (0, 0.0));
    }

    #[test]
    fn collinear_midpoint() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        let idx = SpatialIndex::new(&pts, 1).unwrap();
        let q = Point3::new(2.2, 0.0, 0.0);
        assert_eq!(idx.nearest_squared(&q).unwrap(), scan(&pts, &q));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let mut pts = vec![Point3::new(50.0, 50.0, 50.0); 10];
        pts[2] = Point3::new(-1.0, 0.0, 0.0);
        pts[7] = Point3::new(1.0, 0.0, 0.0);
        for leaf in [1, 2, 16] {
            let idx = SpatialIndex::new(&pts, leaf).unwrap();
            assert_eq!(idx.nearest(&Point3::zero()).unwrap(), (2, 1.0));
        }
        let dup = vec![Point3::new(1.0, 1.0, 1.0); 9];
        let idx = SpatialIndex::new(&dup, 1).unwrap();
        assert_eq!(idx.nearest(&Point3::zero()).unwrap().0, 0);
    }

    #[test]
    fn matches_linear_scan_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts = random_points(&mut rng, 1000, 10.0);
        let idx = SpatialIndex::new(&pts, 8).unwrap();
        for _ in 0..10_000 {
            let q = Point3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            assert_eq!(idx.nearest_squared(&q).unwrap(), scan(&pts, &q));
        }
    }

    #[test]
    fn lattice_ties_match_scan() {
        // Integer lattice queries produce many exact ties.
        let mut pts = Vec::new();
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..3 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let idx = SpatialIndex::new(&pts, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let q = Point3::new(
                rng.gen_range(0..12) as f64 * 0.5,
                rng.gen_range(0..12) as f64 * 0.5,
                rng.gen_range(0..6) as f64 * 0.5,
            );
            assert_eq!(idx.nearest_squared(&q).unwrap(), scan(&pts, &q));
        }
    }

    #[test]
    fn radius_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 500, 5.0);
        let idx = SpatialIndex::new(&pts, 10).unwrap();
        for _ in 0..200 {
            let q = random_points(&mut rng, 1, 5.0)[0];
            let r = rng.gen_range(0.1..3.0);
            let want: Vec<usize> = (0..pts.len())
                .filter(|&i| pts[i].distance_squared(&q) <= r * r)
                .collect();
            assert_eq!(idx.within_radius(&q, r).unwrap(), want);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            SpatialIndex::<f64>::new(&[], 4),
            Err(Error::EmptyCloud)
        ));
        let idx = SpatialIndex::new(&[Point3::<f64>::zero()], 4).unwrap();
        assert!(idx.nearest(&Point3::new(f64::NAN, 0.0, 0.0)).is_err());
    }
}
