//! Deterministic synthetic LiDAR scenes.
//!
//! A scene is a flat ground plane populated with class-labelled box and
//! cylinder primitives. Persons, cars and cyclists move on straight lines
//! parallel to the ego path; everything else is static. Sweeps are
//! produced by casting one ray per (scan line, azimuth step) against the
//! primitives posed at the frame's time.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::class::ClassLabel;
use crate::geometry::{Pose, Vec3};
use crate::math;

/// Intensity returned by the ground plane.
pub const GROUND_INTENSITY: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid sensor configuration: {0}")]
    InvalidSensor(&'static str),
    #[error("could not place {class} objects without overlap inside the scene extent")]
    Placement { class: ClassLabel },
    #[error("frame index {index} out of range (frame count {count})")]
    FrameOutOfRange { index: usize, count: usize },
}

/// Requested number of objects for each named class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ObjectCounts {
    pub person: usize,
    pub car: usize,
    pub cyclist: usize,
    pub trunk: usize,
    pub bush: usize,
    pub building: usize,
}

impl ObjectCounts {
    pub fn get(&self, class: ClassLabel) -> usize {
        match class {
            ClassLabel::Person => self.person,
            ClassLabel::Car => self.car,
            ClassLabel::Cyclist => self.cyclist,
            ClassLabel::Trunk => self.trunk,
            ClassLabel::Bush => self.bush,
            ClassLabel::Building => self.building,
            ClassLabel::Unknown => 0,
        }
    }

    pub fn set(&mut self, class: ClassLabel, count: usize) {
        match class {
            ClassLabel::Person => self.person = count,
            ClassLabel::Car => self.car = count,
            ClassLabel::Cyclist => self.cyclist = count,
            ClassLabel::Trunk => self.trunk = count,
            ClassLabel::Bush => self.bush = count,
            ClassLabel::Building => self.building = count,
            ClassLabel::Unknown => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SceneConfig {
    pub seed: u64,
    /// Side of the square world, meters. The ego path starts at the centre.
    pub extent: f64,
    pub object_counts: ObjectCounts,
    /// Objects labelled `Unknown` (poles, boxes, ...).
    pub clutter_count: usize,
    pub frame_count: usize,
    /// Hz.
    pub frame_rate: f64,
    /// Ego speed along `ego_heading_deg`, m/s. Zero gives a stationary sensor.
    pub ego_speed: f64,
    pub ego_heading_deg: f64,
    /// Half-width of the object-free corridor around the ego path, meters.
    pub road_half_width: f64,
    /// When positive, objects are placed in a band of this depth on either
    /// side of the road, spread along `extent` meters of the ego path,
    /// instead of uniformly over the square world.
    pub roadside_band: f64,
    /// Multiplier on every object's nominal dimensions.
    pub size_scale: f64,
    /// Multiplier on every per-class intensity constant (clamped to 255).
    pub intensity_gain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            extent: 80.0,
            object_counts: ObjectCounts::default(),
            clutter_count: 0,
            frame_count: 10,
            frame_rate: 10.0,
            ego_speed: 0.0,
            ego_heading_deg: 0.0,
            road_half_width: 3.0,
            roadside_band: 0.0,
            size_scale: 1.0,
            intensity_gain: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frame_count < 1 {
            return Err(SceneError::InvalidConfig("frame_count must be >= 1"));
        }
        if !(self.extent > 0.0) {
            return Err(SceneError::InvalidConfig("extent must be > 0"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(SceneError::InvalidConfig("frame_rate must be > 0"));
        }
        if !(self.size_scale > 0.0) || !(self.intensity_gain >= 0.0) {
            return Err(SceneError::InvalidConfig("size_scale and intensity_gain must be positive"));
        }
        if !(self.road_half_width >= 0.0) || !self.ego_speed.is_finite() {
            return Err(SceneError::InvalidConfig("road_half_width and ego_speed must be finite"));
        }
        if !(self.roadside_band >= 0.0) {
            return Err(SceneError::InvalidConfig("roadside_band must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SensorConfig {
    pub scan_lines: usize,
    pub points_per_line: usize,
    pub vertical_fov_min_deg: f64,
    pub vertical_fov_max_deg: f64,
    pub max_range: f64,
    pub mount_height: f64,
    pub range_noise_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            scan_lines: 32,
            points_per_line: 2160,
            vertical_fov_min_deg: -30.67,
            vertical_fov_max_deg: 10.67,
            max_range: 70.0,
            mount_height: 1.8,
            range_noise_sigma: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.scan_lines < 1 || self.points_per_line < 1 {
            return Err(SceneError::InvalidSensor("scan_lines and points_per_line must be >= 1"));
        }
        if !(self.vertical_fov_min_deg < self.vertical_fov_max_deg) {
            return Err(SceneError::InvalidSensor("vertical_fov_min_deg must be below vertical_fov_max_deg"));
        }
        if !(self.max_range > 0.0) {
            return Err(SceneError::InvalidSensor("max_range must be > 0"));
        }
        if !(self.range_noise_sigma >= 0.0) || !self.mount_height.is_finite() {
            return Err(SceneError::InvalidSensor("range_noise_sigma must be >= 0"));
        }
        Ok(())
    }

    /// Elevation of each scan line in radians, top line first. Lines sit at
    /// the centres of `scan_lines` equal bins over the vertical FOV.
    pub fn line_elevations(&self) -> Vec<f64> {
        let (lo, hi) = (self.vertical_fov_min_deg, self.vertical_fov_max_deg);
        let n = self.scan_lines as f64;
        (0..self.scan_lines)
            .map(|l| (hi - (hi - lo) * (l as f64 + 0.5) / n).to_radians())
            .collect()
    }

    /// Azimuth of each step in radians, starting at 0 (+x) counter-clockwise.
    pub fn azimuths(&self) -> Vec<f64> {
        let n = self.points_per_line as f64;
        (0..self.points_per_line).map(|a| 2.0 * PI * a as f64 / n).collect()
    }
}

/// Geometry of an object relative to its base point (footprint centre at
/// ground level).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Primitive {
    /// Box rotated by the object yaw; `length` along local x.
    Box { length: f64, width: f64, height: f64 },
    /// Vertical cylinder.
    Cylinder { radius: f64, height: f64 },
    /// Unbounded horizontal plane at the base height.
    Plane,
}

impl Primitive {
    /// Radius of a vertical cylinder that bounds the footprint.
    fn footprint_radius(&self) -> f64 {
        match *self {
            Primitive::Box { length, width, .. } => 0.5 * math::sqrt(length * length + width * width),
            Primitive::Cylinder { radius, .. } => radius,
            Primitive::Plane => f64::INFINITY,
        }
    }

    fn height(&self) -> f64 {
        match *self {
            Primitive::Box { height, .. } | Primitive::Cylinder { height, .. } => height,
            Primitive::Plane => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneObject {
    pub id: u32,
    pub class: ClassLabel,
    pub primitive: Primitive,
    /// Base point at frame 0, world frame.
    pub start: Vec3,
    pub yaw: f64,
    /// World velocity, m/s. Zero for static objects.
    pub velocity: Vec3,
    pub intensity: f64,
}

impl SceneObject {
    /// Base point at `time` seconds.
    pub fn position_at(&self, time: f64) -> Vec3 {
        self.start + self.velocity * time
    }

    /// Footprint polygon (counter-clockwise) at `time`; cylinders are
    /// approximated by a circumscribed 16-gon.
    pub fn footprint(&self, time: f64) -> Vec<[f64; 2]> {
        let c = self.position_at(time);
        let (s, co) = (math::sin(self.yaw), math::cos(self.yaw));
        match self.primitive {
            Primitive::Box { length, width, .. } => {
                let (hl, hw) = (0.5 * length, 0.5 * width);
                [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
                    .iter()
                    .map(|&(lx, ly)| [c.x + co * lx - s * ly, c.y + s * lx + co * ly])
                    .collect()
            }
            Primitive::Cylinder { radius, .. } => {
                let n = 16;
                let r = radius / math::cos(PI / n as f64);
                (0..n)
                    .map(|i| {
                        let a = 2.0 * PI * i as f64 / n as f64;
                        [c.x + r * math::cos(a), c.y + r * math::sin(a)]
                    })
                    .collect()
            }
            Primitive::Plane => Vec::new(),
        }
    }
}

/// Straight-line ego trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EgoTrajectory {
    pub start: Vec3,
    pub heading: f64,
    pub speed: f64,
}

impl EgoTrajectory {
    pub fn stationary() -> Self {
        Self { start: Vec3::ZERO, heading: 0.0, speed: 0.0 }
    }

    pub fn pose_at_time(&self, t: f64) -> Pose {
        let dir = Vec3::new(math::cos(self.heading), math::sin(self.heading), 0.0);
        Pose::from_yaw(self.start + dir * (self.speed * t), self.heading)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneTruth {
    pub seed: u64,
    pub frame_count: usize,
    pub frame_rate: f64,
    pub ego: EgoTrajectory,
    pub objects: Vec<SceneObject>,
    /// World height of the ground plane; `None` for a scene without ground.
    pub ground_plane_z: Option<f64>,
}

impl SceneTruth {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn class_of(&self, id: u32) -> Option<ClassLabel> {
        self.object(id).map(|o| o.class)
    }

    pub fn time_of(&self, frame_index: usize) -> f64 {
        frame_index as f64 / self.frame_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LidarPoint {
    /// Sensor frame, meters.
    pub position: Vec3,
    /// 0..=255.
    pub intensity: f64,
    /// Ground truth; `None` for ground returns and real data.
    pub object_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PointFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub points: Vec<LidarPoint>,
}

struct ClassTemplate {
    primitive: Primitive,
    speed: f64,
    intensity: f64,
}

fn template(class: ClassLabel) -> ClassTemplate {
    let (primitive, speed, intensity) = match class {
        ClassLabel::Person => (Primitive::Cylinder { radius: 0.3, height: 1.75 }, 1.2, 60.0),
        ClassLabel::Car => (Primitive::Box { length: 4.4, width: 1.8, height: 1.5 }, 5.0, 120.0),
        ClassLabel::Cyclist => (Primitive::Box { length: 1.8, width: 0.6, height: 1.7 }, 3.5, 90.0),
        ClassLabel::Trunk => (Primitive::Cylinder { radius: 0.2, height: 3.5 }, 0.0, 150.0),
        ClassLabel::Bush => (Primitive::Cylinder { radius: 0.9, height: 1.1 }, 0.0, 40.0),
        ClassLabel::Building => (Primitive::Box { length: 10.0, width: 8.0, height: 7.0 }, 0.0, 180.0),
        ClassLabel::Unknown => (Primitive::Box { length: 0.6, width: 0.6, height: 1.0 }, 0.0, 210.0),
    };
    ClassTemplate { primitive, speed, intensity }
}

/// Axis-aligned rectangle `[min_x, min_y, max_x, max_y]`.
type Rect = [f64; 4];

fn rects_overlap(a: &Rect, b: &Rect) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn swept_bounds(obj: &SceneObject, duration: f64, margin: f64) -> Rect {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for t in [0.0, duration] {
        for p in obj.footprint(t) {
            r[0] = r[0].min(p[0]);
            r[1] = r[1].min(p[1]);
            r[2] = r[2].max(p[0]);
            r[3] = r[3].max(p[1]);
        }
    }
    [r[0] - margin, r[1] - margin, r[2] + margin, r[3] + margin]
}

/// Distance from point `p` to segment `a`-`b` in the xy plane.
fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    math::sqrt(cx * cx + cy * cy)
}

const PLACEMENT_ATTEMPTS: usize = 2000;
const PLACEMENT_MARGIN: f64 = 0.5;

/// Builds a scene. Deterministic for a fixed configuration.
pub fn generate_scene(config: &SceneConfig, sensor: &SensorConfig) -> Result<SceneTruth, SceneError> {
    config.validate()?;
    sensor.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let heading = config.ego_heading_deg.to_radians();
    let ego = EgoTrajectory { start: Vec3::ZERO, heading, speed: config.ego_speed };
    let ground_z = -sensor.mount_height;
    let duration = (config.frame_count - 1) as f64 / config.frame_rate;

    let ego_end = ego.pose_at_time(duration).position;
    let (ego_a, ego_b) = ([ego.start.x, ego.start.y], [ego_end.x, ego_end.y]);
    let half = 0.5 * config.extent;
    let dir = Vec3::new(math::cos(heading), math::sin(heading), 0.0);

    let mut placed: Vec<(SceneObject, Rect)> = Vec::new();
    let mut next_id = 1u32;

    // Large objects first so they get room.
    let order = [
        ClassLabel::Building,
        ClassLabel::Car,
        ClassLabel::Bush,
        ClassLabel::Cyclist,
        ClassLabel::Person,
        ClassLabel::Trunk,
        ClassLabel::Unknown,
    ];
    for class in order {
        let count = match class {
            ClassLabel::Unknown => config.clutter_count,
            c => config.object_counts.get(c),
        };
        for _ in 0..count {
            let tpl = template(class);
            let mut done = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let jitter = |rng: &mut ChaCha8Rng| config.size_scale * rng.gen_range(0.85..1.15);
                let primitive = match (class, tpl.primitive) {
                    (ClassLabel::Unknown, _) => {
                        if rng.gen_bool(0.5) {
                            Primitive::Cylinder {
                                radius: config.size_scale * rng.gen_range(0.06..0.25),
                                height: config.size_scale * rng.gen_range(0.6..3.0),
                            }
                        } else {
                            Primitive::Box {
                                length: config.size_scale * rng.gen_range(0.3..1.4),
                                width: config.size_scale * rng.gen_range(0.3..1.4),
                                height: config.size_scale * rng.gen_range(0.4..1.6),
                            }
                        }
                    }
                    (_, Primitive::Box { length, width, height }) => Primitive::Box {
                        length: length * jitter(&mut rng),
                        width: width * jitter(&mut rng),
                        height: height * jitter(&mut rng),
                    },
                    (_, Primitive::Cylinder { radius, height }) => Primitive::Cylinder {
                        radius: radius * jitter(&mut rng),
                        height: height * jitter(&mut rng),
                    },
                    (_, Primitive::Plane) => Primitive::Plane,
                };
                let (x, y) = if config.roadside_band > 0.0 {
                    let along = rng.gen_range(-half..half);
                    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    let offset = config.road_half_width
                        + primitive.footprint_radius()
                        + PLACEMENT_MARGIN
                        + rng.gen_range(0.0..config.roadside_band);
                    let mid = (ego.start + ego_end) * 0.5;
                    (mid.x + dir.x * along - dir.y * side * offset, mid.y + dir.y * along + dir.x * side * offset)
                } else {
                    (rng.gen_range(-half..half), rng.gen_range(-half..half))
                };
                let forward = rng.gen_bool(0.5);
                let (yaw, velocity) = if class.is_movable() {
                    let sign = if forward { 1.0 } else { -1.0 };
                    let speed = tpl.speed * rng.gen_range(0.8..1.2);
                    (if forward { heading } else { heading + PI }, dir * (sign * speed))
                } else {
                    (rng.gen_range(0.0..PI), Vec3::ZERO)
                };
                let obj = SceneObject {
                    id: next_id,
                    class,
                    primitive,
                    start: Vec3::new(x, y, ground_z),
                    yaw,
                    velocity,
                    intensity: (tpl.intensity * config.intensity_gain).min(255.0),
                };
                let bounds = swept_bounds(&obj, duration, PLACEMENT_MARGIN);
                let clear_of_road = [obj.position_at(0.0), obj.position_at(duration)].iter().all(|p| {
                    point_segment_distance([p.x, p.y], ego_a, ego_b)
                        > config.road_half_width + primitive.footprint_radius()
                });
                let clear_of_others = placed.iter().all(|(_, r)| !rects_overlap(r, &bounds));
                if clear_of_road && clear_of_others {
                    placed.push((obj, bounds));
                    next_id += 1;
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(SceneError::Placement { class });
            }
        }
    }

    let mut objects: Vec<SceneObject> = placed.into_iter().map(|(o, _)| o).collect();
    objects.sort_by_key(|o| o.id);
    Ok(SceneTruth {
        seed: config.seed,
        frame_count: config.frame_count,
        frame_rate: config.frame_rate,
        ego,
        objects,
        ground_plane_z: Some(ground_z),
    })
}

/// Ego pose at `frame_index`.
pub fn pose_at(truth: &SceneTruth, frame_index: usize) -> Result<Pose, SceneError> {
    if frame_index >= truth.frame_count {
        return Err(SceneError::FrameOutOfRange { index: frame_index, count: truth.frame_count });
    }
    Ok(truth.ego.pose_at_time(truth.time_of(frame_index)))
}

/// Nearest positive intersection distance of a unit ray with an object
/// posed at `base`.
pub fn intersect_primitive(
    origin: Vec3,
    dir: Vec3,
    primitive: &Primitive,
    base: Vec3,
    yaw: f64,
) -> Option<f64> {
    const EPS: f64 = 1e-12;
    match *primitive {
        Primitive::Plane => {
            if math::abs(dir.z) < EPS {
                return None;
            }
            let t = (base.z - origin.z) / dir.z;
            (t > EPS).then_some(t)
        }
        Primitive::Box { length, width, height } => {
            // Into the box's local frame (rotate by -yaw about z).
            let (s, c) = (math::sin(yaw), math::cos(yaw));
            let rel = origin - base;
            let o = [c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z];
            let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
            let lo = [-0.5 * length, -0.5 * width, 0.0];
            let hi = [0.5 * length, 0.5 * width, height];
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if math::abs(d[k]) < EPS {
                    if o[k] < lo[k] || o[k] > hi[k] {
                        return None;
                    }
                } else {
                    let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                }
            }
            if t0 > t1 || t1 <= EPS {
                None
            } else if t0 > EPS {
                Some(t0)
            } else {
                Some(t1)
            }
        }
        Primitive::Cylinder { radius, height } => {
            let (ox, oy) = (origin.x - base.x, origin.y - base.y);
            let (z_lo, z_hi) = (base.z, base.z + height);
            let mut best = f64::INFINITY;
            let a = dir.x * dir.x + dir.y * dir.y;
            if a > EPS {
                let b = 2.0 * (ox * dir.x + oy * dir.y);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = math::sqrt(disc);
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        let z = origin.z + t * dir.z;
                        if t > EPS && z >= z_lo && z <= z_hi && t < best {
                            best = t;
                        }
                    }
                }
            }
            if math::abs(dir.z) > EPS {
                for zc in [z_lo, z_hi] {
                    let t = (zc - origin.z) / dir.z;
                    let (x, y) = (ox + t * dir.x, oy + t * dir.y);
                    if t > EPS && x * x + y * y <= radius * radius && t < best {
                        best = t;
                    }
                }
            }
            best.is_finite().then_some(best)
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * PI * u2)
}

/// Gaussian range noise truncated to +-6 sigma by resampling.
fn truncated_noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z = standard_normal(rng);
        if math::abs(z) <= 6.0 {
            return z * sigma;
        }
    }
}

struct PosedObject<'a> {
    object: &'a SceneObject,
    base: Vec3,
}

/// Ray-casts one sweep. Points come out in scan-line-major order.
pub fn simulate_frame(
    truth: &SceneTruth,
    frame_index: usize,
    sensor: &SensorConfig,
) -> Result<PointFrame, SceneError> {
    sensor.validate()?;
    let pose = pose_at(truth, frame_index)?;
    let time = truth.time_of(frame_index);
    let origin = pose.position;

    let mut rng = ChaCha8Rng::seed_from_u64(truth.seed);
    rng.set_stream(frame_index as u64 + 1);

    let posed: Vec<PosedObject<'_>> = truth
        .objects
        .iter()
        .map(|o| PosedObject { object: o, base: o.position_at(time) })
        .filter(|p| {
            let r = p.object.primitive.footprint_radius();
            let h = p.object.primitive.height();
            let centre = p.base + Vec3::new(0.0, 0.0, 0.5 * h);
            centre.distance(origin) <= sensor.max_range + r + h
        })
        .collect();

    // Bucket objects by the azimuth steps they can cover (world azimuth
    // relative to the sensor heading).
    let azimuths = sensor.azimuths();
    let steps = sensor.points_per_line;
    let step = 2.0 * PI / steps as f64;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); steps];
    for (i, p) in posed.iter().enumerate() {
        let local = pose.to_sensor(p.base);
        let dist = local.horizontal_norm();
        let r = p.object.primitive.footprint_radius();
        if dist <= r + 1e-6 {
            buckets.iter_mut().for_each(|b| b.push(i));
            continue;
        }
        let centre = math::atan2(local.y, local.x);
        let half = libm::asin((r / dist).min(1.0)) + 2.0 * step;
        let first = math::floor((centre - half) / step) as i64;
        let last = math::floor((centre + half) / step) as i64 + 1;
        let span = (last - first + 1).min(steps as i64);
        for k in 0..span {
            let a = (first + k).rem_euclid(steps as i64) as usize;
            buckets[a].push(i);
        }
    }

    let mut points = Vec::new();
    for el in sensor.line_elevations() {
        let (se, ce) = (math::sin(el), math::cos(el));
        for (a, &az) in azimuths.iter().enumerate() {
            let local_dir = Vec3::new(ce * math::cos(az), ce * math::sin(az), se);
            let dir = pose.direction_to_world(local_dir);
            let mut best = f64::INFINITY;
            let mut hit: Option<(f64, Option<u32>)> = None;
            if let Some(gz) = truth.ground_plane_z {
                if let Some(t) =
                    intersect_primitive(origin, dir, &Primitive::Plane, Vec3::new(0.0, 0.0, gz), 0.0)
                {
                    best = t;
                    hit = Some((GROUND_INTENSITY, None));
                }
            }
            for &i in &buckets[a] {
                let p = &posed[i];
                if let Some(t) = intersect_primitive(origin, dir, &p.object.primitive, p.base, p.object.yaw) {
                    if t < best {
                        best = t;
                        hit = Some((p.object.intensity, Some(p.object.id)));
                    }
                }
            }
            let Some((intensity, object_id)) = hit else { continue };
            if best > sensor.max_range {
                continue;
            }
            let range = best + truncated_noise(&mut rng, sensor.range_noise_sigma);
            if range <= 0.0 {
                continue;
            }
            points.push(LidarPoint { position: local_dir * range, intensity, object_id });
        }
    }

    Ok(PointFrame { frame_index, timestamp: time, pose, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_sensor() -> SensorConfig {
        SensorConfig { scan_lines: 8, points_per_line: 90, max_range: 60.0, ..SensorConfig::default() }
    }

    #[test]
    fn empty_counts_give_only_ground() {
        let truth = generate_scene(&SceneConfig::default(), &SensorConfig::default()).unwrap();
        assert!(truth.objects.is_empty());
        assert_eq!(truth.ground_plane_z, Some(-1.8));
    }

    #[test]
    fn same_seed_is_identical() {
        let mut cfg = SceneConfig::default();
        cfg.object_counts.car = 3;
        cfg.object_counts.trunk = 4;
        cfg.clutter_count = 2;
        let a = generate_scene(&cfg, &SensorConfig::default()).unwrap();
        let b = generate_scene(&cfg, &SensorConfig::default()).unwrap();
        assert_eq!(a, b);
        cfg.seed = 2;
        let c = generate_scene(&cfg, &SensorConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn crowded_scene_reports_failing_class() {
        let mut cfg = SceneConfig { extent: 12.0, ..SceneConfig::default() };
        cfg.object_counts.building = 5;
        let err = generate_scene(&cfg, &SensorConfig::default()).unwrap_err();
        assert_eq!(err, SceneError::Placement { class: ClassLabel::Building });
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = SceneConfig { frame_count: 0, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&cfg, &SensorConfig::default()), Err(SceneError::InvalidConfig(_))));
        let sensor = SensorConfig { vertical_fov_min_deg: 5.0, vertical_fov_max_deg: 5.0, ..SensorConfig::default() };
        assert!(matches!(generate_scene(&SceneConfig::default(), &sensor), Err(SceneError::InvalidSensor(_))));
    }

    #[test]
    fn frame_out_of_range() {
        let truth = generate_scene(&SceneConfig::default(), &SensorConfig::default()).unwrap();
        assert_eq!(pose_at(&truth, 10), Err(SceneError::FrameOutOfRange { index: 10, count: 10 }));
        assert!(simulate_frame(&truth, 10, &flat_sensor()).is_err());
    }

    #[test]
    fn movers_are_linear_and_static_objects_fixed() {
        let mut cfg = SceneConfig::default();
        cfg.object_counts.person = 2;
        cfg.object_counts.bush = 2;
        let truth = generate_scene(&cfg, &SensorConfig::default()).unwrap();
        for o in &truth.objects {
            if o.class.is_movable() {
                assert!(o.velocity.norm() > 0.5);
            } else {
                assert_eq!(o.velocity, Vec3::ZERO);
            }
        }
    }

    #[test]
    fn box_and_cylinder_intersections() {
        let prim = Primitive::Box { length: 2.0, width: 2.0, height: 2.0 };
        let t = intersect_primitive(Vec3::new(-5.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), &prim, Vec3::ZERO, 0.0);
        assert!((t.unwrap() - 4.0).abs() < 1e-12);
        let cyl = Primitive::Cylinder { radius: 1.0, height: 2.0 };
        let t = intersect_primitive(Vec3::new(-5.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), &cyl, Vec3::ZERO, 0.0);
        assert!((t.unwrap() - 4.0).abs() < 1e-12);
        // Straight down onto the top cap.
        let t = intersect_primitive(Vec3::new(0.2, 0.1, 5.0), Vec3::new(0.0, 0.0, -1.0), &cyl, Vec3::ZERO, 0.0);
        assert!((t.unwrap() - 3.0).abs() < 1e-12);
        // Miss above.
        assert!(intersect_primitive(Vec3::new(-5.0, 0.0, 3.0), Vec3::new(1.0, 0.0, 0.0), &cyl, Vec3::ZERO, 0.0).is_none());
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let truth = generate_scene(&SceneConfig::default(), &SensorConfig::default()).unwrap();
        let sensor = SensorConfig { range_noise_sigma: 0.05, ..flat_sensor() };
        let a = simulate_frame(&truth, 3, &sensor).unwrap();
        let b = simulate_frame(&truth, 3, &sensor).unwrap();
        assert_eq!(a, b);
        for p in &a.points {
            assert!(p.position.norm() <= sensor.max_range + 6.0 * sensor.range_noise_sigma);
        }
    }
}
