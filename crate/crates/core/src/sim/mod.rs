//! Synthetic driving worlds: boxes on a ground slab, a moving ego vehicle,
//! ground-truth occupancy and ray-cast visibility.

mod io;
mod observe;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_world, save_world, WorldFile};
pub use observe::{observe, world_occupancy, Observation, VisibilityParams};

use crate::gaussian::SE3Pose;
use crate::taxonomy::{
    self, BARRIER, BUILDING, CAR, CYCLIST, GROUND, PEDESTRIAN, TRUCK, VEGETATION,
};
use crate::{seed, Error, Result};

/// Top of the ground slab in world z.
pub const GROUND_TOP: f64 = -1.5;
/// Bottom of the ground slab in world z.
pub const GROUND_BOTTOM: f64 = -2.0;

/// Box with a yaw-only orientation, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub class: u8,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
}

impl WorldBox {
    pub fn pose(&self) -> SE3Pose {
        SE3Pose::from_yaw(self.yaw, self.center.into())
    }

    /// Point in the box's local frame.
    fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector3::from(self.center);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Closed membership test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let l = self.local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i])
    }

    /// Same as `contains` with every half extent grown by `margin`.
    pub fn contains_with_margin(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let l = self.local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i] + margin)
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let pose = self.pose();
        let h = self.half_extents;
        std::array::from_fn(|i| {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            pose.transform_point(&Vector3::new(sx * h[0], sy * h[1], sz * h[2]))
        })
    }

    /// Planar distance from `p` to the footprint (0 inside).
    fn footprint_distance(&self, p: &Vector2<f64>) -> f64 {
        let l = self.local(&Vector3::new(p.x, p.y, self.center[2]));
        let dx = (l.x.abs() - self.half_extents[0]).max(0.0);
        let dy = (l.y.abs() - self.half_extents[1]).max(0.0);
        (dx * dx + dy * dy).sqrt()
    }

    fn footprint_axes(&self) -> [Vector2<f64>; 2] {
        let (s, c) = self.yaw.sin_cos();
        [Vector2::new(c, s), Vector2::new(-s, c)]
    }

    /// Separating-axis test on the footprints grown by `margin`.
    fn footprints_overlap(&self, other: &WorldBox, margin: f64) -> bool {
        let d = Vector2::new(
            other.center[0] - self.center[0],
            other.center[1] - self.center[1],
        );
        let (a, b) = (self.footprint_axes(), other.footprint_axes());
        let radius = |axes: &[Vector2<f64>; 2], h: &[f64; 3], n: &Vector2<f64>| {
            (h[0] + margin) * axes[0].dot(n).abs() + (h[1] + margin) * axes[1].dot(n).abs()
        };
        a.iter().chain(&b).all(|n| {
            d.dot(n).abs() <= radius(&a, &self.half_extents, n) + radius(&b, &other.half_extents, n)
        })
    }
}

/// Box moving with constant velocity (m/frame) and yaw rate (rad/frame)
/// from its frame-0 pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicBox {
    pub class: u8,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 3],
    pub yaw_rate: f64,
}

impl DynamicBox {
    pub fn at(&self, frame: usize) -> WorldBox {
        let t = frame as f64;
        WorldBox {
            class: self.class,
            center: std::array::from_fn(|i| self.center[i] + self.velocity[i] * t),
            half_extents: self.half_extents,
            yaw: self.yaw + self.yaw_rate * t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Planar world bound `[xmin, ymin]`..`[xmax, ymax]`.
    pub bound_min: [f64; 2],
    pub bound_max: [f64; 2],
    pub static_boxes: Vec<WorldBox>,
    pub dynamic_boxes: Vec<DynamicBox>,
    pub dynamic_classes: Vec<u8>,
}

impl WorldSpec {
    pub fn empty() -> Self {
        Self {
            bound_min: [-1e3, -1e3],
            bound_max: [1e3, 1e3],
            static_boxes: Vec::new(),
            dynamic_boxes: Vec::new(),
            dynamic_classes: taxonomy::DEFAULT_DYNAMIC.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |class: u8, h: &[f64; 3], c: &[f64; 3]| {
            if !taxonomy::is_semantic(class) {
                return Err(Error::InvalidArgument(format!("box class {class}")));
            }
            if !h.iter().all(|x| *x > 0.0 && x.is_finite()) || !c.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate box {h:?} at {c:?}"
                )));
            }
            Ok(())
        };
        for b in &self.static_boxes {
            check(b.class, &b.half_extents, &b.center)?;
        }
        for b in &self.dynamic_boxes {
            check(b.class, &b.half_extents, &b.center)?;
            if !self.dynamic_classes.contains(&b.class) {
                return Err(Error::InvalidArgument(format!(
                    "dynamic box class {} is not a dynamic class",
                    b.class
                )));
            }
        }
        if !(0..2).all(|i| self.bound_min[i] < self.bound_max[i]) {
            return Err(Error::InvalidArgument("empty world bound".into()));
        }
        Ok(())
    }

    /// Every box at `frame`, static boxes first, in declaration order.
    pub fn boxes_at(&self, frame: usize) -> Vec<WorldBox> {
        self.static_boxes
            .iter()
            .copied()
            .chain(self.dynamic_boxes.iter().map(|d| d.at(frame)))
            .collect()
    }

    fn inside_bound(&self, b: &WorldBox) -> bool {
        b.corners()
            .iter()
            .all(|c| (0..2).all(|i| c[i] >= self.bound_min[i] && c[i] <= self.bound_max[i]))
    }
}

/// Constant speed and yaw rate for a run of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoSegment {
    pub frames: usize,
    /// Meters per frame.
    pub speed: f64,
    /// Radians per frame.
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoTrajectory {
    pub poses: Vec<SE3Pose>,
    /// Seconds between frames.
    pub frame_period: f64,
}

impl EgoTrajectory {
    /// Integrates planar unicycle motion exactly over each frame, starting at
    /// the identity pose; `frames` poses in total.
    pub fn from_segments(
        segments: &[EgoSegment],
        frames: usize,
        frame_period: f64,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument(
                "trajectory needs at least one frame".into(),
            ));
        }
        let mut poses = Vec::with_capacity(frames);
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        poses.push(SE3Pose::identity());
        let mut steps = segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(*s, s.frames));
        while poses.len() < frames {
            let s = steps
                .next()
                .ok_or_else(|| Error::InvalidArgument("segments shorter than trajectory".into()))?;
            let w = s.yaw_rate;
            if w.abs() < 1e-12 {
                x += s.speed * th.cos();
                y += s.speed * th.sin();
            } else {
                x += s.speed / w * ((th + w).sin() - th.sin());
                y += s.speed / w * (th.cos() - (th + w).cos());
            }
            th += w;
            poses.push(SE3Pose::new(
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), th),
                Vector3::new(x, y, 0.0),
            ));
        }
        Ok(Self {
            poses,
            frame_period,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        self.poses.iter().try_for_each(SE3Pose::validate)
    }
}

pub fn ego_pose_at(traj: &EgoTrajectory, frame: usize) -> Result<SE3Pose> {
    traj.poses
        .get(frame)
        .copied()
        .ok_or(Error::FrameOutOfRange {
            frame,
            len: traj.len(),
        })
}

/// Generator settings. Distances in meters, speeds per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub n_static: usize,
    pub n_dynamic: usize,
    pub frames: usize,
    pub frame_period: f64,
    pub world_half_extent: f64,
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    pub segment_frames: [usize; 2],
    /// Lateral distance of static boxes from the ego path.
    pub static_offset: [f64; 2],
    /// Lateral distance of dynamic boxes from the ego at placement time.
    pub dynamic_offset: [f64; 2],
    /// Free space kept around the ego footprint.
    pub ego_clearance: f64,
    /// Gap kept between boxes.
    pub box_gap: f64,
    pub max_attempts: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_static: 12,
            n_dynamic: 6,
            frames: 40,
            frame_period: 0.5,
            world_half_extent: 200.0,
            ego_speed: [1.0, 3.0],
            ego_yaw_rate: [-0.03, 0.03],
            segment_frames: [5, 15],
            static_offset: [5.0, 22.0],
            dynamic_offset: [4.0, 15.0],
            ego_clearance: 3.0,
            box_gap: 0.6,
            max_attempts: 10_000,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2]| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} range {r:?}")))
            }
        };
        range("ego_speed", self.ego_speed)?;
        range("ego_yaw_rate", self.ego_yaw_rate)?;
        range("static_offset", self.static_offset)?;
        range("dynamic_offset", self.dynamic_offset)?;
        if self.ego_speed[0] < 0.0 {
            return Err(Error::InvalidArgument("negative ego speed".into()));
        }
        if self.frames == 0
            || self.segment_frames[0] == 0
            || self.segment_frames[0] > self.segment_frames[1]
        {
            return Err(Error::InvalidArgument(
                "frame counts must be positive".into(),
            ));
        }
        if !(self.world_half_extent > 0.0 && self.frame_period > 0.0) {
            return Err(Error::InvalidArgument(
                "world extent and frame period must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Half extents (x, y, z) ranges per class.
fn size_ranges(class: u8) -> [[f64; 2]; 3] {
    match class {
        BUILDING => [[2.0, 6.0], [2.0, 6.0], [1.5, 3.75]],
        VEGETATION => [[0.8, 2.5], [0.8, 2.5], [0.75, 2.0]],
        BARRIER => [[1.0, 4.0], [0.25, 0.35], [0.4, 0.6]],
        CAR => [[2.0, 2.4], [0.85, 1.0], [0.7, 0.85]],
        TRUCK => [[3.5, 4.5], [1.15, 1.3], [1.4, 1.7]],
        PEDESTRIAN => [[0.3, 0.4], [0.3, 0.4], [0.8, 0.95]],
        CYCLIST => [[0.8, 1.0], [0.3, 0.4], [0.8, 0.9]],
        _ => [[0.5, 2.0], [0.5, 2.0], [0.5, 2.0]],
    }
}

/// Speed range in m/frame.
fn speed_range(class: u8) -> [f64; 2] {
    match class {
        CAR => [0.6, 2.0],
        TRUCK => [0.4, 1.2],
        PEDESTRIAN => [0.1, 0.4],
        CYCLIST => [0.3, 0.8],
        _ => [0.0, 0.0],
    }
}

fn sample_box(rng: &mut ChaCha8Rng, class: u8, xy: Vector2<f64>, yaw: f64) -> WorldBox {
    let r = size_ranges(class);
    let h = [uniform(rng, r[0]), uniform(rng, r[1]), uniform(rng, r[2])];
    WorldBox {
        class,
        center: [xy.x, xy.y, GROUND_TOP + h[2]],
        half_extents: h,
        yaw,
    }
}

/// Deterministic world and ego path for `(seed, params)`.
pub fn gen_world(seed: u64, params: &WorldParams) -> Result<(WorldSpec, EgoTrajectory)> {
    params.validate()?;
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag::WORLD]));

    let mut segments = Vec::new();
    let mut total = 0;
    while total + 1 < params.frames {
        let frames = rng.random_range(params.segment_frames[0]..=params.segment_frames[1]);
        segments.push(EgoSegment {
            frames,
            speed: uniform(&mut rng, params.ego_speed),
            yaw_rate: uniform(&mut rng, params.ego_yaw_rate),
        });
        total += frames;
    }
    let traj = EgoTrajectory::from_segments(&segments, params.frames, params.frame_period)?;

    let e = params.world_half_extent;
    let mut world = WorldSpec {
        bound_min: [-e, -e],
        bound_max: [e, e],
        static_boxes: vec![WorldBox {
            class: GROUND,
            center: [0.0, 0.0, 0.5 * (GROUND_TOP + GROUND_BOTTOM)],
            half_extents: [e, e, 0.5 * (GROUND_TOP - GROUND_BOTTOM)],
            yaw: 0.0,
        }],
        dynamic_boxes: Vec::new(),
        dynamic_classes: taxonomy::DEFAULT_DYNAMIC.to_vec(),
    };
    for p in &traj.poses {
        let t = p.translation;
        if t.x.abs() > e - 30.0 || t.y.abs() > e - 30.0 {
            return Err(Error::PlacementFailed {
                what: "ego path inside world bound".into(),
                attempts: 1,
            });
        }
    }
    let ego_xy: Vec<Vector2<f64>> = traj.poses.iter().map(|p| p.translation.xy()).collect();

    let static_classes = [BUILDING, VEGETATION, BARRIER];
    for i in 0..params.n_static {
        let class = static_classes[i % static_classes.len()];
        let mut placed = None;
        for _ in 0..params.max_attempts {
            let anchor = traj.poses[rng.random_range(0..traj.len())];
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let local = Vector3::new(
                uniform(&mut rng, [-20.0, 20.0]),
                side * uniform(&mut rng, params.static_offset),
                0.0,
            );
            let xy = anchor.transform_point(&local).xy();
            let yaw = anchor.yaw() + uniform(&mut rng, [-0.4, 0.4]);
            let b = sample_box(&mut rng, class, xy, yaw);
            let clear_of_ego = ego_xy
                .iter()
                .all(|e| b.footprint_distance(e) > params.ego_clearance);
            let clear_of_boxes = world.static_boxes[1..]
                .iter()
                .all(|o| !b.footprints_overlap(o, params.box_gap));
            if clear_of_ego && clear_of_boxes && world.inside_bound(&b) {
                placed = Some(b);
                break;
            }
        }
        world
            .static_boxes
            .push(placed.ok_or_else(|| Error::PlacementFailed {
                what: format!("static box {i}"),
                attempts: params.max_attempts,
            })?);
    }

    let dynamic_classes = taxonomy::DEFAULT_DYNAMIC;
    for i in 0..params.n_dynamic {
        let class = dynamic_classes[rng.random_range(0..dynamic_classes.len())];
        let mut placed = None;
        for _ in 0..params.max_attempts {
            let f0 = rng.random_range(0..traj.len());
            let anchor = traj.poses[f0];
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let local = Vector3::new(
                uniform(&mut rng, [-10.0, 20.0]),
                side * uniform(&mut rng, params.dynamic_offset),
                0.0,
            );
            let xy = anchor.transform_point(&local).xy();
            let reverse = if rng.random_bool(0.3) {
                std::f64::consts::PI
            } else {
                0.0
            };
            let heading = anchor.yaw() + reverse + uniform(&mut rng, [-0.3, 0.3]);
            let speed = uniform(&mut rng, speed_range(class));
            let yaw_rate = uniform(&mut rng, [-0.01, 0.01]);
            let b = sample_box(&mut rng, class, xy, heading);
            let v = [speed * heading.cos(), speed * heading.sin(), 0.0];
            let t0 = f0 as f64;
            let d = DynamicBox {
                class,
                center: [
                    b.center[0] - v[0] * t0,
                    b.center[1] - v[1] * t0,
                    b.center[2],
                ],
                half_extents: b.half_extents,
                yaw: heading - yaw_rate * t0,
                velocity: v,
                yaw_rate,
            };
            let ok = (0..traj.len()).all(|t| {
                let bt = d.at(t);
                world.inside_bound(&bt)
                    && bt.footprint_distance(&ego_xy[t]) > params.ego_clearance
                    && world.static_boxes[1..]
                        .iter()
                        .all(|o| !bt.footprints_overlap(o, params.box_gap))
                    && world
                        .dynamic_boxes
                        .iter()
                        .all(|o| !bt.footprints_overlap(&o.at(t), params.box_gap))
            });
            if ok {
                placed = Some(d);
                break;
            }
        }
        world
            .dynamic_boxes
            .push(placed.ok_or_else(|| Error::PlacementFailed {
                what: format!("dynamic box {i}"),
                attempts: params.max_attempts,
            })?);
    }
    world.validate()?;
    Ok((world, traj))
}
