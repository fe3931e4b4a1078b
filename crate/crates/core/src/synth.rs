//! Synthetic multi-body scenes with exact ground-truth motion.
//!
//! Bodies are boxes, cylinders or planar walls sampled on their surfaces and
//! moved by a constant body-frame rigid step per frame. A static shell of
//! walls forms the background, and an optional ego motion moves the sensor.
//! Ground-truth flow comes from the poses, never from the samples: each
//! observed point is mapped by its body's exact relative transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rand_distr::StandardNormal;
use crate::geometry::{FlowField, Point3, PointCloud, RigidTransform};
use crate::scalar::Real;
use crate::trajectory::{trajectories_from_frames, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box, `size = [length, width, height]`, resting on z = 0.
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    /// Vertical rectangle in the local x–z plane.
    Wall { width: f64, height: f64 },
}

impl Shape {
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Box { size: [l, w, h] } => l * w + 2.0 * (l * h + w * h),
            Shape::Cylinder { radius, height } => std::f64::consts::TAU * radius * height + std::f64::consts::PI * radius * radius,
            Shape::Wall { width, height } => width * height,
        }
    }

    /// Uniform sample on the visible surface (bottom faces excluded).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3<f64> {
        match *self {
            Shape::Box { size: [l, w, h] } => {
                let faces = [l * w, l * h, l * h, w * h, w * h];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut face = 0;
                while face < 4 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let u = rng.gen_range(-0.5..0.5);
                let v = rng.gen_range(-0.5..0.5);
                let mut z = || if h > 0.0 { rng.gen_range(0.0..h) } else { 0.0 };
                match face {
                    0 => Point3::new(u * l, v * w, h),
                    1 => Point3::new(u * l, 0.5 * w, z()),
                    2 => Point3::new(u * l, -0.5 * w, z()),
                    3 => Point3::new(0.5 * l, v * w, z()),
                    _ => Point3::new(-0.5 * l, v * w, z()),
                }
            }
            Shape::Cylinder { radius, height } => {
                let side = std::f64::consts::TAU * radius * height;
                let cap = std::f64::consts::PI * radius * radius;
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                if rng.gen_range(0.0..side + cap) < side {
                    Point3::new(radius * a.cos(), radius * a.sin(), rng.gen_range(0.0..height))
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    Point3::new(r * a.cos(), r * a.sin(), height)
                }
            }
            Shape::Wall { width, height } => {
                Point3::new(rng.gen_range(-0.5..0.5) * width, 0.0, rng.gen_range(0.0..height))
            }
        }
    }
}

/// A rigid body: its shape, initial world pose, and constant per-frame step
/// expressed in the body frame (`pose_{t+1} = pose_t ∘ step`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub shape: Shape,
    pub pose: RigidTransform<f64>,
    pub step: RigidTransform<f64>,
    /// Relative sampling density in frames after the first (1 = same).
    #[serde(default = "one")]
    pub later_density: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EgoPreset {
    #[default]
    None,
    /// 0.5 m forward per frame.
    Forward,
    /// 0.5 m forward and 1° left per frame.
    Turn,
}

impl EgoPreset {
    pub fn step(self) -> RigidTransform<f64> {
        match self {
            EgoPreset::None => RigidTransform::identity(),
            EgoPreset::Forward => RigidTransform::from_translation(Point3::new(0.5, 0.0, 0.0)),
            EgoPreset::Turn => RigidTransform::from_yaw(1f64.to_radians(), Point3::new(0.5, 0.0, 0.0)),
        }
    }
}

impl std::str::FromStr for EgoPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EgoPreset::None),
            "forward" => Ok(EgoPreset::Forward),
            "turn" => Ok(EgoPreset::Turn),
            other => Err(Error::param("ego", format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub body_count: usize,
    pub points_per_body: usize,
    pub background_points: usize,
    pub frame_count: usize,
    /// Maximum yaw per frame, degrees.
    pub rot_max_deg: f64,
    /// Maximum translation per frame, meters.
    pub trans_max: f64,
    pub ego: EgoPreset,
    /// Draw fresh surface samples every frame.
    pub resample: bool,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Add a sampled ground plane (plumbing only; evaluation assumes it removed).
    #[serde(default)]
    pub ground: bool,
    /// Explicit bodies; when set, `body_count`, `rot_max_deg` and `trans_max` are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bodies: Option<Vec<BodySpec>>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            body_count: 3,
            points_per_body: 600,
            background_points: 800,
            frame_count: 2,
            rot_max_deg: 2.0,
            trans_max: 1.0,
            ego: EgoPreset::None,
            resample: true,
            noise_sigma: 0.01,
            seed: 0,
            ground: false,
            bodies: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 1 {
            return Err(Error::param("frame_count", "must be at least 1"));
        }
        if self.background_points == 0 && self.body_count == 0 && self.bodies.is_none() {
            return Err(Error::param("background_points", "scene would be empty"));
        }
        for (name, v) in [
            ("rot_max_deg", self.rot_max_deg),
            ("trans_max", self.trans_max),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene<T> {
    pub spec: SceneSpec,
    pub frames: Vec<PointCloud<T>>,
    /// Flow of frame `t` points toward frame `t + 1`, for each consecutive pair.
    pub gt_flows: Vec<FlowField<T>>,
    /// Per frame, per point: body id, with the static background last.
    pub labels: Vec<Vec<i32>>,
    /// Per frame `t`, per label: the exact sensor-frame motion to frame `t + 1`.
    pub relative_motions: Vec<Vec<RigidTransform<f64>>>,
    /// Ground-truth trajectories of the first frame's points.
    pub gt_trajectories: Vec<Trajectory<T>>,
    pub body_count: usize,
}

impl<T: Real> SyntheticScene<T> {
    /// Label used for the static background.
    pub fn background_label(&self) -> i32 {
        self.body_count as i32
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

struct Item {
    shape: Shape,
    pose: RigidTransform<f64>,
    step: RigidTransform<f64>,
    count: usize,
    later_density: f64,
    label: i32,
}

fn random_bodies(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<BodySpec> {
    (0..spec.body_count)
        .map(|k| {
            // Car-like boxes moving along their long axis, and upright cylinders.
            let shape = match k % 3 {
                0 | 1 => Shape::Box {
                    size: [rng.gen_range(3.5..5.0), rng.gen_range(1.6..2.1), rng.gen_range(1.3..1.8)],
                },
                _ => Shape::Cylinder {
                    radius: rng.gen_range(0.4..0.8),
                    height: rng.gen_range(1.4..2.0),
                },
            };
            let (col, row) = ((k % 3) as f64, (k / 3) as f64);
            let center = Point3::new(
                -7.0 + 7.0 * col + rng.gen_range(-1.0..1.0),
                -7.0 + 7.0 * row + rng.gen_range(-1.0..1.0),
                0.0,
            );
            let pose = RigidTransform::from_yaw(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI), center);
            let yaw = rng.gen_range(-1.0..=1.0) * spec.rot_max_deg.to_radians();
            let speed = rng.gen_range(0.0..=1.0) * spec.trans_max;
            BodySpec {
                shape,
                pose,
                step: RigidTransform::from_yaw(yaw, Point3::new(speed, 0.0, 0.0)),
                later_density: 1.0,
            }
        })
        .collect()
}

fn background_items(spec: &SceneSpec, label: i32) -> Vec<Item> {
    let mut shapes = vec![
        (Shape::Wall { width: 30.0, height: 3.0 }, RigidTransform::from_yaw(0.0, Point3::new(0.0, 15.0, 0.0))),
        (Shape::Wall { width: 30.0, height: 3.0 }, RigidTransform::from_yaw(0.0, Point3::new(0.0, -15.0, 0.0))),
        (
            Shape::Wall { width: 30.0, height: 3.0 },
            RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Point3::new(15.0, 0.0, 0.0)),
        ),
        (
            Shape::Wall { width: 30.0, height: 3.0 },
            RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Point3::new(-15.0, 0.0, 0.0)),
        ),
    ];
    if spec.ground {
        shapes.push((
            Shape::Box { size: [30.0, 30.0, 0.0] },
            RigidTransform::identity(),
        ));
    }
    let total_area: f64 = shapes.iter().map(|(s, _)| s.area()).sum();
    let mut remaining = spec.background_points;
    let n = shapes.len();
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (shape, pose))| {
            let count = if i + 1 == n {
                remaining
            } else {
                let c = ((spec.background_points as f64) * shape.area() / total_area).round() as usize;
                let c = c.min(remaining);
                remaining -= c;
                c
            };
            Item {
                shape,
                pose,
                step: RigidTransform::identity(),
                count,
                later_density: 1.0,
                label,
            }
        })
        .collect()
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

/// Generates the scene described by `spec`.
pub fn generate<T: Real>(spec: &SceneSpec) -> Result<SyntheticScene<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bodies = match &spec.bodies {
        Some(b) => b.clone(),
        None => random_bodies(spec, &mut rng),
    };
    let body_count = bodies.len();
    let mut items: Vec<Item> = bodies
        .iter()
        .enumerate()
        .map(|(k, b)| Item {
            shape: b.shape,
            pose: b.pose,
            step: b.step,
            count: spec.points_per_body,
            later_density: b.later_density,
            label: k as i32,
        })
        .collect();
    items.extend(background_items(spec, body_count as i32));
    build_scene(spec, items, body_count)
}

fn build_scene<T: Real>(spec: &SceneSpec, items: Vec<Item>, body_count: usize) -> Result<SyntheticScene<T>> {
    let frames_n = spec.frame_count;
    let ego = spec.ego.step();
    // sensor pose in the world at each frame
    let sensor: Vec<RigidTransform<f64>> = (0..frames_n).map(|t| ego.power(t)).collect();
    // world pose of each item at each frame
    let poses: Vec<Vec<RigidTransform<f64>>> = items
        .iter()
        .map(|it| {
            let mut p = it.pose;
            (0..frames_n)
                .map(|_| {
                    let here = p;
                    p = p.compose(&it.step);
                    here
                })
                .collect()
        })
        .collect();
    let observed = |i: usize, t: usize| sensor[t].inverse().compose(&poses[i][t]);

    let fixed: Vec<Vec<Point3<f64>>> = {
        let mut rng = frame_rng(spec.seed, 0);
        items
            .iter()
            .map(|it| (0..it.count).map(|_| it.shape.sample(&mut rng)).collect())
            .collect()
    };

    let mut frames = Vec::with_capacity(frames_n);
    let mut labels = Vec::with_capacity(frames_n);
    let mut item_of_point = Vec::with_capacity(frames_n);
    for t in 0..frames_n {
        let mut rng = frame_rng(spec.seed, t);
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        let mut owner = Vec::new();
        for (i, it) in items.iter().enumerate() {
            let local: Vec<Point3<f64>> = if spec.resample && t > 0 {
                let n = ((it.count as f64) * it.later_density).round() as usize;
                (0..n).map(|_| it.shape.sample(&mut rng)).collect()
            } else {
                fixed[i].clone()
            };
            let pose = observed(i, t);
            for s in local {
                let mut p = pose.apply(&s);
                if spec.noise_sigma > 0.0 {
                    p += Point3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * spec.noise_sigma;
                }
                pts.push(p);
                lab.push(it.label);
                owner.push(i);
            }
        }
        frames.push(PointCloud::with_frame(pts, t as i64 + 1)?);
        labels.push(lab);
        item_of_point.push(owner);
    }

    // relative motion of item i from frame t to t+1, in sensor coordinates
    let relative = |i: usize, t: usize| observed(i, t + 1).compose(&observed(i, t).inverse());
    let label_count = body_count + 1;
    let relative_motions: Vec<Vec<RigidTransform<f64>>> = (0..frames_n.saturating_sub(1))
        .map(|t| {
            (0..label_count)
                .map(|l| {
                    items
                        .iter()
                        .position(|it| it.label == l as i32)
                        .map_or_else(RigidTransform::identity, |i| relative(i, t))
                })
                .collect()
        })
        .collect();

    let gt_flows = (0..frames_n.saturating_sub(1))
        .map(|t| {
            FlowField::new(
                frames[t]
                    .points()
                    .iter()
                    .zip(&item_of_point[t])
                    .map(|(p, &i)| relative(i, t).apply(p) - *p)
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let traj_frames: Vec<Vec<Point3<f64>>> = (0..frames_n)
        .map(|k| {
            frames[0]
                .points()
                .iter()
                .zip(&item_of_point[0])
                .map(|(p, &i)| observed(i, k).compose(&observed(i, 0).inverse()).apply(p))
                .collect()
        })
        .collect();
    let gt_trajectories = trajectories_from_frames(&traj_frames)?;

    let cast_traj = gt_trajectories
        .iter()
        .map(|tr| Trajectory::new(tr.positions().iter().map(|p| p.cast()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        frames: frames.iter().map(PointCloud::cast).collect(),
        gt_flows: gt_flows.iter().map(FlowField::cast).collect(),
        labels,
        relative_motions,
        gt_trajectories: cast_traj,
        body_count,
    })
}

/// Gap between the facing sides of the two adversarial bodies, meters.
pub const ADVERSARIAL_GAP: f64 = 1.0;

/// Two long boxes side by side, sliding past each other in opposite
/// directions, with the second body resampled more sparsely after frame 1.
///
/// Most of each body's surface is parallel to its motion, so nearest-point
/// alignment alone sees little evidence of the motion away from the ends,
/// and the close neighbour invites cross-body matches.
pub fn two_body_adversarial<T: Real>(spec: &SceneSpec) -> Result<SyntheticScene<T>> {
    let size = [5.0, 1.8, 1.5];
    let offset = 0.5 * (size[1] + ADVERSARIAL_GAP);
    let speed = if spec.trans_max > 0.0 { spec.trans_max } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xAD5E);
    let yaw0 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let jitter = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
    let frame = RigidTransform::from_yaw(yaw0, jitter);
    let body = |side: f64, dir: f64, density: f64| BodySpec {
        shape: Shape::Box { size },
        pose: frame.compose(&RigidTransform::from_translation(Point3::new(0.0, side * offset, 0.0))),
        step: RigidTransform::from_translation(Point3::new(dir * speed, 0.0, 0.0)),
        later_density: density,
    };
    let spec = SceneSpec {
        bodies: Some(vec![body(1.0, 1.0, 1.0), body(-1.0, -1.0, 0.6)]),
        resample: true,
        ..spec.clone()
    };
    generate(&spec)
}
