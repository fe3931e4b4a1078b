//! Points, clouds, flows and rigid motions.
//!
//! Point order is the identity that links a cloud to its flow field and to
//! cluster labels; nothing in this module reorders points.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

/// Displacements share the point representation.
pub type Vector3<T> = Point3<T>;

impl<T: Real> Point3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Self::new(T::lit(x), T::lit(y), T::lit(z))
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn distance_squared(&self, other: &Self) -> T {
        (*self - *other).norm_squared()
    }

    pub fn distance(&self, other: &Self) -> T {
        self.distance_squared(other).sqrt()
    }

    pub fn cast<U: Real>(self) -> Point3<U> {
        Point3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

impl<T: Real> Add for Point3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Point3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Point3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Point3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Point3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T> Index<usize> for Point3<T> {
    type Output = T;
    fn index(&self, axis: usize) -> &T {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range for a 3-vector"),
        }
    }
}

fn first_non_finite<T: Real>(points: &[Point3<T>]) -> Option<usize> {
    points.iter().position(|p| !p.is_finite())
}

fn rows_to_array<T: Real>(rows: &[Point3<T>]) -> Array2<T> {
    Array2::from_shape_fn((rows.len(), 3), |(i, k)| rows[i][k])
}

fn array_to_rows<T: Real>(a: &Array2<T>) -> Vec<Point3<T>> {
    a.rows()
        .into_iter()
        .map(|r| Point3::new(r[0], r[1], r[2]))
        .collect()
}

/// An ordered, non-empty set of finite 3D points captured at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point3<T>>,
    frame_time: i64,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Result<Self> {
        Self::with_frame(points, 0)
    }

    pub fn with_frame(points: Vec<Point3<T>>, frame_time: i64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = first_non_finite(&points) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { points, frame_time })
    }

    /// Builds a cloud from an `N x 3` array.
    pub fn from_array(a: &Array2<T>) -> Result<Self> {
        if a.ncols() != 3 {
            return Err(Error::LengthMismatch {
                expected: 3,
                actual: a.ncols(),
            });
        }
        Self::new(array_to_rows(a))
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame_time(&self) -> i64 {
        self.frame_time
    }

    pub fn set_frame_time(&mut self, t: i64) {
        self.frame_time = t;
    }

    pub fn to_array(&self) -> Array2<T> {
        rows_to_array(&self.points)
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::with_frame(
            indices.iter().map(|&i| self.points[i]).collect(),
            self.frame_time,
        )
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.cast()).collect(),
            frame_time: self.frame_time,
        }
    }
}

impl<T> Index<usize> for PointCloud<T> {
    type Output = Point3<T>;
    fn index(&self, i: usize) -> &Point3<T> {
        &self.points[i]
    }
}

/// Per-point displacement vectors aligned with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    vectors: Vec<Vector3<T>>,
}

impl<T: Real> FlowField<T> {
    pub fn new(vectors: Vec<Vector3<T>>) -> Result<Self> {
        if let Some(index) = first_non_finite(&vectors) {
            return Err(Error::NonFiniteFlow { index });
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![Point3::zero(); n],
        }
    }

    pub fn from_array(a: &Array2<T>) -> Result<Self> {
        if a.ncols() != 3 {
            return Err(Error::LengthMismatch {
                expected: 3,
                actual: a.ncols(),
            });
        }
        Self::new(array_to_rows(a))
    }

    /// Flow induced by a rigid motion: `f_i = T(p_i) - p_i`.
    pub fn from_transform(transform: &RigidTransform<T>, cloud: &PointCloud<T>) -> Self {
        Self {
            vectors: cloud
                .points()
                .iter()
                .map(|p| transform.apply(p) - *p)
                .collect(),
        }
    }

    pub fn vectors(&self) -> &[Vector3<T>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_array(&self) -> Array2<T> {
        rows_to_array(&self.vectors)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
        }
    }

    /// Errors unless the field pairs with a cloud of `n` points.
    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.len(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            vectors: self.vectors.iter().map(|p| p.cast()).collect(),
        }
    }
}

impl<T> Index<usize> for FlowField<T> {
    type Output = Vector3<T>;
    fn index(&self, i: usize) -> &Vector3<T> {
        &self.vectors[i]
    }
}

/// A proper rigid motion (rotation with determinant +1, then translation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<T> {
    rotation: [[T; 3]; 3],
    translation: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn new(rotation: [[T; 3]; 3], translation: Vector3<T>) -> Result<Self> {
        let tol = T::lit(T::ORTHO_TOL);
        for (r, row) in rotation.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidTransform(format!(
                        "rotation[{r}][{c}] is not finite"
                    )));
                }
            }
        }
        if !translation.is_finite() {
            return Err(Error::InvalidTransform("translation is not finite".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).fold(T::zero(), |acc, k| acc + rotation[k][i] * rotation[k][j]);
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::InvalidTransform(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let det = det3(&rotation);
        if (det - T::one()).abs() > tol {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: Point3::zero(),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            translation,
            ..Self::identity()
        }
    }

    /// Rodrigues rotation about `axis` (need not be unit) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<T>, angle: T, translation: Vector3<T>) -> Result<Self> {
        let n = axis.norm();
        if !(n > T::zero()) {
            return Err(Error::InvalidTransform("rotation axis has zero length".into()));
        }
        let k = axis * (T::one() / n);
        let (s, c) = angle.sin_cos();
        let v = T::one() - c;
        let rotation = [
            [
                c + k.x * k.x * v,
                k.x * k.y * v - k.z * s,
                k.x * k.z * v + k.y * s,
            ],
            [
                k.y * k.x * v + k.z * s,
                c + k.y * k.y * v,
                k.y * k.z * v - k.x * s,
            ],
            [
                k.z * k.x * v - k.y * s,
                k.z * k.y * v + k.x * s,
                c + k.z * k.z * v,
            ],
        ];
        Self::new(rotation, translation)
    }

    /// Rotation about the vertical axis, the common case for ground vehicles.
    pub fn from_yaw(yaw: T, translation: Vector3<T>) -> Self {
        let (s, c) = yaw.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[c, -s, z], [s, c, z], [z, z, o]],
            translation,
        }
    }

    /// Uniformly random rotation (via a normalized Gaussian quaternion) and a
    /// translation with components uniform in `[-max_translation, max_translation]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for c in q.iter_mut() {
                *c = rng.sample(rand_distr::StandardNormal);
            }
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.iter_mut().for_each(|c| *c /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        let r = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let mut t = || T::lit(rng.gen_range(-max_translation..=max_translation));
        let translation = Point3::new(t(), t(), t());
        Self {
            rotation: r.map(|row| row.map(T::lit)),
            translation,
        }
    }

    pub fn rotation(&self) -> &[[T; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<T> {
        self.translation
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        let r = &self.rotation;
        Point3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn apply(&self, p: &Point3<T>) -> Point3<T> {
        self.rotate(p) + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &Self) -> Self {
        let a = &self.rotation;
        let b = &first.rotation;
        let mut rotation = [[T::zero(); 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).fold(T::zero(), |acc, k| acc + a[i][k] * b[k][j]);
            }
        }
        Self {
            rotation,
            translation: self.rotate(&first.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rotation = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Self {
            rotation,
            translation: Point3::zero(),
        };
        Self {
            translation: -inv.rotate(&self.translation),
            ..inv
        }
    }

    /// `self` applied `k` times.
    pub fn power(&self, k: usize) -> Self {
        (0..k).fold(Self::identity(), |acc, _| self.compose(&acc))
    }
}

fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Maps every point through `transform`, preserving order.
pub fn apply_transform<T: Real>(
    transform: &RigidTransform<T>,
    cloud: &PointCloud<T>,
) -> Result<PointCloud<T>> {
    if let Some(index) = first_non_finite(cloud.points()) {
        return Err(Error::NonFinitePoint { index });
    }
    PointCloud::with_frame(
        cloud.points().iter().map(|p| transform.apply(p)).collect(),
        cloud.frame_time(),
    )
}

/// Moves each point by its flow vector: `p_i + f_i`.
pub fn project_flow<T: Real>(cloud: &PointCloud<T>, flow: &FlowField<T>) -> Result<PointCloud<T>> {
    flow.check_len(cloud.len())?;
    PointCloud::with_frame(
        cloud
            .points()
            .iter()
            .zip(flow.vectors())
            .map(|(p, f)| *p + *f)
            .collect(),
        cloud.frame_time(),
    )
}
