//! Deterministic box-world generator with a flat-shaded camera renderer.
//!
//! Scenes are laid out in a local frame equal to the ego frame at the
//! current time step; a random start pose then places that frame in the
//! world so consumers must use relative poses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classes::{self, class_color, SKY_COLOR};
use super::grid::{GridSpec, OccupancyGrid};
use super::{Image, SensorFrame, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::{compose, CameraCalib, Pose, Vec3};
use crate::trajectory::TrajectoryWaypoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathFamily {
    Straight,
    LeftTurn,
    RightTurn,
    RandomSpline,
    /// Uniform choice among straight, left and right per sequence.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundStyle {
    /// Every ground voxel is driveable surface.
    Uniform,
    /// Driveable corridor along the ego path, then sidewalk, then terrain.
    Road { half_width: f64, sidewalk: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    /// Heading in degrees, counter-clockwise from ego +x.
    pub yaw_deg: f64,
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub position: Vec3,
}

/// Box given explicitly, in the local frame at the current time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub class: u8,
    /// Footprint center; the box rests on the ground plane.
    pub center: [f64; 2],
    /// Length, width, height.
    pub size: Vec3,
    pub yaw: f64,
    #[serde(default)]
    pub velocity: [f64; 2],
}

impl BoxSpec {
    fn at(&self, time: f64) -> [f64; 2] {
        [
            self.center[0] + self.velocity[0] * time,
            self.center[1] + self.velocity[1] * time,
        ]
    }

    fn mirrored(&self) -> Self {
        Self {
            center: [self.center[0], -self.center[1]],
            yaw: -self.yaw,
            velocity: [self.velocity[0], -self.velocity[1]],
            ..*self
        }
    }

    /// Local coordinates of `p` in the box frame at `time`, origin at the
    /// footprint center on the ground.
    fn to_box(&self, p: &Vec3, time: f64) -> Vec3 {
        let c = self.at(time);
        let (s, co) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        [co * dx + s * dy, -s * dx + co * dy, p[2]]
    }

    pub fn contains(&self, p: &Vec3, time: f64) -> bool {
        let q = self.to_box(p, time);
        q[0].abs() <= self.size[0] / 2.0
            && q[1].abs() <= self.size[1] / 2.0
            && q[2] >= 0.0
            && q[2] <= self.size[2]
    }

    fn radius(&self) -> f64 {
        0.5 * (self.size[0].powi(2) + self.size[1].powi(2)).sqrt()
    }
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub grid: GridSpec,
    /// Placement region `[min, max]` for box footprints, local frame.
    pub bounds: [[f64; 2]; 2],
    pub static_boxes: usize,
    pub dynamic_boxes: usize,
    /// Dynamic box speed range, m/s.
    pub speed_range: [f64; 2],
    /// Ego speed range, m/s.
    pub ego_speed: [f64; 2],
    /// Turn radius range for turning paths, meters.
    pub turn_radius: [f64; 2],
    pub path: PathFamily,
    pub ground: GroundStyle,
    pub cameras: Vec<CameraSpec>,
    pub frame_interval: f64,
    /// Past observations before the current frame.
    pub past_frames: usize,
    pub future_frames: usize,
    /// Minimum gap between any box and the ego path, meters.
    pub clearance: f64,
    /// Reflect the scene across the ego x axis.
    #[serde(default)]
    pub mirror: bool,
    /// Boxes placed verbatim in addition to the random ones.
    #[serde(default)]
    pub fixed_boxes: Vec<BoxSpec>,
    /// Emit the current-frame grid for reconstruction scoring.
    #[serde(default)]
    pub current_grid: bool,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                dims: [64, 64, 8],
                voxel_size: 0.5,
                origin: [-16.0, -16.0, -1.0],
            },
            bounds: [[-16.0, -24.0], [32.0, 24.0]],
            static_boxes: 8,
            dynamic_boxes: 3,
            speed_range: [1.0, 4.0],
            ego_speed: [2.0, 4.0],
            turn_radius: [8.0, 14.0],
            path: PathFamily::Mixed,
            ground: GroundStyle::Uniform,
            cameras: ring_rig(4, 90.0, 64, 32, 1.6),
            frame_interval: 0.5,
            past_frames: 2,
            future_frames: 4,
            clearance: 1.0,
            mirror: false,
            fixed_boxes: Vec::new(),
            current_grid: false,
        }
    }
}

/// `n` cameras evenly spaced in heading, mounted at `height` above ground.
pub fn ring_rig(
    n: usize,
    hfov_deg: f64,
    width: usize,
    height_px: usize,
    height: f64,
) -> Vec<CameraSpec> {
    (0..n)
        .map(|i| CameraSpec {
            yaw_deg: 360.0 * i as f64 / n as f64,
            hfov_deg,
            width,
            height: height_px,
            position: [0.0, 0.0, height],
        })
        .collect()
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let [lo, hi] = self.bounds;
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(Error::config("synthetic.bounds", "bounds are degenerate"));
        }
        if self.cameras.is_empty() {
            return Err(Error::config(
                "synthetic.cameras",
                "at least one camera is required",
            ));
        }
        for c in &self.cameras {
            if c.width == 0 || c.height == 0 || !(c.hfov_deg > 0.0 && c.hfov_deg < 180.0) {
                return Err(Error::config(
                    "synthetic.cameras",
                    "cameras need a positive size and 0 < hfov < 180",
                ));
            }
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::config(
                "synthetic.frame_interval",
                "must be positive",
            ));
        }
        if self.future_frames == 0 {
            return Err(Error::config(
                "synthetic.future_frames",
                "must be at least 1",
            ));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if !ordered(self.speed_range)
            || !ordered(self.ego_speed)
            || !ordered(self.turn_radius)
            || self.turn_radius[0] <= 0.0
        {
            return Err(Error::config(
                "synthetic",
                "speed and radius ranges must be ordered and non-negative",
            ));
        }
        if let GroundStyle::Road {
            half_width,
            sidewalk,
        } = self.ground
        {
            if !(half_width > 0.0 && sidewalk >= 0.0) {
                return Err(Error::config(
                    "synthetic.ground",
                    "road widths must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn calibs(&self) -> Vec<CameraCalib> {
        self.cameras
            .iter()
            .map(|c| {
                CameraCalib::looking_at_yaw(
                    c.width,
                    c.height,
                    c.hfov_deg.to_radians(),
                    c.position,
                    c.yaw_deg.to_radians(),
                )
            })
            .collect()
    }
}

/// Piecewise-constant-curvature path, sampled densely.
struct EgoPath {
    /// Poses in the local frame at `(time, pose)`, sorted by time.
    samples: Vec<(f64, [f64; 3])>,
    speed: f64,
}

const PATH_SUBSTEPS: usize = 64;

impl EgoPath {
    fn new(speed: f64, curvature: [f64; 2], t0: f64, t1: f64, dt: f64) -> Self {
        let mut samples = Vec::new();
        // backwards along a straight line for t < 0
        let steps_back = ((-t0) / dt * PATH_SUBSTEPS as f64).ceil() as usize;
        for k in (1..=steps_back).rev() {
            let t = -(k as f64) * dt / PATH_SUBSTEPS as f64;
            samples.push((t, [speed * t, 0.0, 0.0]));
        }
        let mut state = [0.0f64, 0.0, 0.0];
        samples.push((0.0, state));
        let steps = (t1 / dt * PATH_SUBSTEPS as f64).ceil() as usize;
        let h = dt / PATH_SUBSTEPS as f64;
        for k in 1..=steps {
            let s_mid = speed * (k as f64 - 0.5) * h;
            let kappa = curvature[0] + curvature[1] * s_mid;
            let ds = speed * h;
            state = arc_step(state, kappa, ds);
            samples.push((k as f64 * h, state));
        }
        Self { samples, speed }
    }

    /// Exact pose at an integer multiple of the sample spacing.
    fn at(&self, time: f64, dt: f64) -> Pose {
        let h = dt / PATH_SUBSTEPS as f64;
        let idx = self
            .samples
            .iter()
            .position(|(t, _)| (t - time).abs() < h * 1e-6);
        let s = match idx {
            Some(i) => self.samples[i].1,
            None if time < 0.0 => [self.speed * time, 0.0, 0.0],
            None => panic!("path queried off-grid at {time}"),
        };
        Pose::planar(s[0], s[1], s[2])
    }

    /// Distance from a ground point to the path polyline, extended straight
    /// backwards and along the last heading forwards.
    fn distance(&self, x: f64, y: f64, extend: f64) -> f64 {
        let mut best = f64::INFINITY;
        let pts: Vec<[f64; 2]> = self.samples.iter().map(|(_, s)| [s[0], s[1]]).collect();
        let first = pts[0];
        let last = *self.samples.last().expect("non-empty path");
        let tail = [
            last.1[0] + extend * last.1[2].cos(),
            last.1[1] + extend * last.1[2].sin(),
        ];
        let head = [first[0] - extend, first[1]];
        let mut prev = head;
        for p in pts.iter().chain(std::iter::once(&tail)) {
            best = best.min(segment_distance([x, y], prev, *p));
            prev = *p;
        }
        best
    }
}

fn arc_step([x, y, th]: [f64; 3], kappa: f64, ds: f64) -> [f64; 3] {
    if kappa.abs() < 1e-12 {
        return [x + ds * th.cos(), y + ds * th.sin(), th];
    }
    let th2 = th + kappa * ds;
    [
        x + (th2.sin() - th.sin()) / kappa,
        y - (th2.cos() - th.cos()) / kappa,
        th2,
    ]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

/// A generated scene before rasterization and rendering.
struct Scene {
    path: EgoPath,
    boxes: Vec<BoxSpec>,
    ground: GroundStyle,
}

const ROAD_EXTENSION: f64 = 40.0;

impl Scene {
    fn ground_class(&self, x: f64, y: f64) -> u8 {
        match self.ground {
            GroundStyle::Uniform => classes::DRIVEABLE_SURFACE,
            GroundStyle::Road {
                half_width,
                sidewalk,
            } => {
                let d = self.path.distance(x, y, ROAD_EXTENSION);
                if d <= half_width {
                    classes::DRIVEABLE_SURFACE
                } else if d <= half_width + sidewalk {
                    classes::SIDEWALK
                } else {
                    classes::TERRAIN
                }
            }
        }
    }

    /// Label of a local-frame point at `time`, ignoring the ground slab.
    fn box_label(&self, p: &Vec3, time: f64) -> Option<u8> {
        // later boxes win, matching painter order
        self.boxes
            .iter()
            .rev()
            .find(|b| b.contains(p, time))
            .map(|b| b.class)
    }

    fn rasterize(&self, spec: &GridSpec, ego: &Pose, time: f64) -> OccupancyGrid {
        let mut grid = OccupancyGrid::empty(*spec);
        let ground_z = ground_layer(spec);
        for z in 0..spec.dims[2] {
            for y in 0..spec.dims[1] {
                for x in 0..spec.dims[0] {
                    let c = spec.center([x, y, z]);
                    let w = ego.transform_point(&c);
                    let label = if Some(z) == ground_z {
                        Some(self.ground_class(w[0], w[1]))
                    } else if c[2] >= 0.0 {
                        self.box_label(&w, time)
                    } else {
                        None
                    };
                    if let Some(l) = label {
                        grid.set([x, y, z], l);
                    }
                }
            }
        }
        grid
    }

    /// First hit of a local-frame ray: `(distance, color)`.
    fn trace(&self, o: &Vec3, d: &Vec3, time: f64) -> [u8; 3] {
        let mut best = f64::INFINITY;
        let mut color = SKY_COLOR;
        if d[2] < -1e-12 {
            let t = -o[2] / d[2];
            if t > 0.0 && t < FAR_PLANE {
                best = t;
                let cls = self.ground_class(o[0] + t * d[0], o[1] + t * d[1]);
                color = shade(class_color(cls), GROUND_SHADE);
            }
        }
        for b in &self.boxes {
            if let Some((t, face)) = ray_box(b, o, d, time) {
                if t < best {
                    best = t;
                    color = shade(class_color(b.class), FACE_SHADE[face]);
                }
            }
        }
        color
    }
}

const FAR_PLANE: f64 = 80.0;
const GROUND_SHADE: f64 = 0.9;
/// Shading per hit face: ±length axis, ±width axis, top.
const FACE_SHADE: [f64; 3] = [0.8, 0.65, 1.0];

fn shade(c: [u8; 3], k: f64) -> [u8; 3] {
    c.map(|v| (f64::from(v) * k).round() as u8)
}

/// Slab test in the box frame. Returns hit distance and face axis.
fn ray_box(b: &BoxSpec, o: &Vec3, d: &Vec3, time: f64) -> Option<(f64, usize)> {
    let lo_o = b.to_box(o, time);
    let (s, c) = b.yaw.sin_cos();
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let lo = [-b.size[0] / 2.0, -b.size[1] / 2.0, 0.0];
    let hi = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2]];
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut face = 0;
    for a in 0..3 {
        if ld[a].abs() < 1e-12 {
            if lo_o[a] < lo[a] || lo_o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - lo_o[a]) / ld[a];
        let t2 = (hi[a] - lo_o[a]) / ld[a];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if near > tmin {
            tmin = near;
            face = a;
        }
        tmax = tmax.min(far);
    }
    (tmin <= tmax && tmin > 1e-9).then_some((tmin, face))
}

/// Index of the z layer holding the ground slab, just below `z = 0`.
pub fn ground_layer(spec: &GridSpec) -> Option<usize> {
    let z = -0.5 * spec.voxel_size;
    let f = ((z - spec.origin[2]) / spec.voxel_size).floor();
    (f >= 0.0 && f < spec.dims[2] as f64).then_some(f as usize)
}

const PLACEMENT_ATTEMPTS: usize = 2000;

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn random_box(rng: &mut ChaCha8Rng, dynamic: bool, spec: &SyntheticWorldSpec) -> BoxSpec {
    let (class, l, w, h) = if dynamic {
        if rng.random_bool(0.7) {
            (
                classes::CAR,
                rng.random_range(3.5..4.5),
                rng.random_range(1.7..2.0),
                rng.random_range(1.4..1.7),
            )
        } else {
            (
                classes::TRUCK,
                rng.random_range(5.0..6.5),
                rng.random_range(2.2..2.6),
                rng.random_range(2.6..3.2),
            )
        }
    } else if rng.random_bool(0.5) {
        (
            classes::MANMADE,
            rng.random_range(2.0..4.5),
            rng.random_range(2.0..4.5),
            rng.random_range(2.0..3.5),
        )
    } else {
        (
            classes::VEGETATION,
            rng.random_range(1.0..2.5),
            rng.random_range(1.0..2.5),
            rng.random_range(1.5..3.0),
        )
    };
    let [lo, hi] = spec.bounds;
    let center = [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
    ];
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let velocity = if dynamic {
        let speed = sample_range(rng, spec.speed_range);
        let heading = if rng.random_bool(0.5) {
            yaw
        } else {
            yaw + std::f64::consts::PI
        };
        [speed * heading.cos(), speed * heading.sin()]
    } else {
        [0.0, 0.0]
    };
    BoxSpec {
        class,
        center,
        size: [l, w, h],
        yaw,
        velocity,
    }
}

fn build_scene(spec: &SyntheticWorldSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let dt = spec.frame_interval;
    let speed = sample_range(rng, spec.ego_speed);
    let radius = sample_range(rng, spec.turn_radius);
    let family = match spec.path {
        PathFamily::Mixed => [
            PathFamily::Straight,
            PathFamily::LeftTurn,
            PathFamily::RightTurn,
        ][rng.random_range(0..3)],
        f => f,
    };
    let curvature = match family {
        PathFamily::Straight | PathFamily::Mixed => [0.0, 0.0],
        PathFamily::LeftTurn => [1.0 / radius, 0.0],
        PathFamily::RightTurn => [-1.0 / radius, 0.0],
        PathFamily::RandomSpline => {
            let k0 = rng.random_range(-1.0..1.0) / radius;
            let k1 = rng.random_range(-1.0..1.0) / (radius * radius);
            [k0, k1]
        }
    };
    let t0 = -(spec.past_frames as f64) * dt;
    let t1 = spec.future_frames as f64 * dt;
    let path = EgoPath::new(speed, curvature, t0, t1, dt);

    let times: Vec<f64> = (-(spec.past_frames as i64)..=spec.future_frames as i64)
        .map(|k| k as f64 * dt)
        .collect();
    let mut boxes: Vec<BoxSpec> = Vec::new();
    for dynamic in std::iter::repeat_n(false, spec.static_boxes)
        .chain(std::iter::repeat_n(true, spec.dynamic_boxes))
    {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let b = random_box(rng, dynamic, spec);
            let clear_of_path = times.iter().all(|&t| {
                let c = b.at(t);
                path.distance(c[0], c[1], 0.0) > b.radius() + spec.clearance
            });
            let clear_of_boxes = boxes.iter().all(|o| {
                times.iter().all(|&t| {
                    let (a, c) = (b.at(t), o.at(t));
                    ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt() > b.radius() + o.radius()
                })
            });
            if clear_of_path && clear_of_boxes {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(
                "synthetic.bounds",
                format!(
                    "could not place {} boxes clear of the ego path inside the bounds",
                    spec.static_boxes + spec.dynamic_boxes
                ),
            ));
        }
    }
    boxes.extend(spec.fixed_boxes.iter().copied());
    let mut path = path;
    if spec.mirror {
        boxes = boxes.iter().map(BoxSpec::mirrored).collect();
        path = EgoPath::new(speed, [-curvature[0], -curvature[1]], t0, t1, dt);
    }
    Ok(Scene {
        path,
        boxes,
        ground: spec.ground,
    })
}

fn render(scene: &Scene, calib: &CameraCalib, ego: &Pose, time: f64) -> Image {
    let mut img = Image::new(calib.width, calib.height);
    let cam_to_local = compose(ego, &calib.cam_to_ego);
    let origin = cam_to_local.translation;
    for v in 0..calib.height {
        for u in 0..calib.width {
            let d = cam_to_local.rotate(&calib.ray_direction(u as f64 + 0.5, v as f64 + 0.5));
            img.set(u, v, scene.trace(&origin, &d, time));
        }
    }
    img
}

/// Builds one sequence. Deterministic in `(spec, seed)`.
pub fn generate_synthetic_sequence(spec: &SyntheticWorldSpec, seed: u64) -> Result<SequenceSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = build_scene(spec, &mut rng)?;
    let start = Pose::planar(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(-3.0..3.0),
    );
    let dt = spec.frame_interval;
    let calibs = spec.calibs();

    let past = (0..=spec.past_frames)
        .map(|k| {
            let time = -((spec.past_frames - k) as f64) * dt;
            let ego_local = scene.path.at(time, dt);
            SensorFrame {
                images: calibs
                    .iter()
                    .map(|c| render(&scene, c, &ego_local, time))
                    .collect(),
                calibs: calibs.clone(),
                ego_pose: compose(&start, &ego_local),
                timestamp: time,
            }
        })
        .collect();
    let mut future_grids = Vec::with_capacity(spec.future_frames);
    let mut trajectory = Vec::with_capacity(spec.future_frames);
    for t in 1..=spec.future_frames {
        let time = t as f64 * dt;
        let ego_local = scene.path.at(time, dt);
        future_grids.push(scene.rasterize(&spec.grid, &ego_local, time));
        trajectory.push(TrajectoryWaypoint::from_pose(&ego_local, t as f64));
    }
    let current_grid = spec
        .current_grid
        .then(|| scene.rasterize(&spec.grid, &Pose::identity(), 0.0));
    Ok(SequenceSample {
        id: format!("synthetic-{seed:08}"),
        past,
        future_grids,
        trajectory,
        current_grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_data::classes::FREE;
    use crate::scene_data::grid_to_points;

    fn small_spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            grid: GridSpec {
                dims: [16, 16, 4],
                voxel_size: 1.0,
                origin: [-8.0, -8.0, -1.0],
            },
            bounds: [[-10.0, -12.0], [16.0, 12.0]],
            static_boxes: 3,
            dynamic_boxes: 1,
            cameras: ring_rig(4, 90.0, 16, 8, 1.6),
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn empty_world_is_ground_only() {
        let spec = SyntheticWorldSpec {
            static_boxes: 0,
            dynamic_boxes: 0,
            ..small_spec()
        };
        let s = generate_synthetic_sequence(&spec, 3).unwrap();
        let gz = ground_layer(&spec.grid).unwrap();
        assert_eq!(gz, 0);
        for g in &s.future_grids {
            for (i, &l) in g.labels.iter().enumerate() {
                let [_, _, z] = g.spec.coords(i);
                if z == gz {
                    assert_eq!(l, classes::DRIVEABLE_SURFACE);
                } else {
                    assert_eq!(l, FREE);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(
            generate_synthetic_sequence(&spec, 11).unwrap(),
            generate_synthetic_sequence(&spec, 11).unwrap()
        );
        assert_ne!(
            generate_synthetic_sequence(&spec, 11).unwrap(),
            generate_synthetic_sequence(&spec, 12).unwrap()
        );
    }

    #[test]
    fn timestamps_increase_and_lengths_match() {
        let s = generate_synthetic_sequence(&small_spec(), 5).unwrap();
        assert_eq!(s.past.len(), 3);
        assert_eq!(s.trajectory.len(), s.future_grids.len());
        assert!(s.past.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(s.past.last().unwrap().timestamp, 0.0);
        assert!(s
            .trajectory
            .iter()
            .enumerate()
            .all(|(i, w)| w.t == (i + 1) as f64));
    }

    #[test]
    fn moving_box_centroid_advances_with_velocity() {
        let spec = SyntheticWorldSpec {
            grid: GridSpec {
                dims: [64, 32, 12],
                voxel_size: 0.25,
                origin: [-8.0, -4.0, -1.0],
            },
            static_boxes: 0,
            dynamic_boxes: 0,
            ego_speed: [0.0, 0.0],
            path: PathFamily::Straight,
            fixed_boxes: vec![BoxSpec {
                class: classes::CAR,
                center: [-2.0, 1.0],
                size: [2.0, 1.0, 1.5],
                yaw: 0.0,
                velocity: [1.0, 0.0],
            }],
            ..small_spec()
        };
        let s = generate_synthetic_sequence(&spec, 0).unwrap();
        let mut prev: Option<f64> = None;
        for (t, g) in s.future_grids.iter().enumerate() {
            let ps = grid_to_points(g, false);
            let xs: Vec<f64> = ps
                .points
                .iter()
                .zip(&ps.labels)
                .filter(|(_, &l)| l == classes::CAR)
                .map(|(p, _)| p[0])
                .collect();
            // independent rasterization: voxel centers inside the moved box
            let time = (t + 1) as f64 * 0.5;
            let mut want = 0usize;
            let mut want_sum = 0.0;
            for i in 0..g.spec.len() {
                let c = g.spec.center(g.spec.coords(i));
                let cx = -2.0 + time;
                if (c[0] - cx).abs() <= 1.0
                    && (c[1] - 1.0).abs() <= 0.5
                    && c[2] >= 0.0
                    && c[2] <= 1.5
                {
                    want += 1;
                    want_sum += c[0];
                }
            }
            assert_eq!(xs.len(), want);
            let centroid = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((centroid - want_sum / want as f64).abs() < 1e-9);
            if let Some(p) = prev {
                assert!((centroid - p - 0.5).abs() < 1e-9, "step {}", centroid - p);
            }
            prev = Some(centroid);
        }
    }

    #[test]
    fn left_and_right_turns_differ_after_first_frame() {
        let base = SyntheticWorldSpec {
            ground: GroundStyle::Road {
                half_width: 3.0,
                sidewalk: 1.5,
            },
            ..small_spec()
        };
        let left = generate_synthetic_sequence(
            &SyntheticWorldSpec {
                path: PathFamily::LeftTurn,
                ..base.clone()
            },
            9,
        )
        .unwrap();
        let right = generate_synthetic_sequence(
            &SyntheticWorldSpec {
                path: PathFamily::RightTurn,
                ..base
            },
            9,
        )
        .unwrap();
        for t in 1..left.future_grids.len() {
            assert_ne!(left.future_grids[t].labels, right.future_grids[t].labels);
        }
    }

    #[test]
    fn mirrored_scene_gives_mirrored_grids() {
        let spec = SyntheticWorldSpec {
            path: PathFamily::LeftTurn,
            ground: GroundStyle::Road {
                half_width: 3.0,
                sidewalk: 1.5,
            },
            ..small_spec()
        };
        let a = generate_synthetic_sequence(&spec, 21).unwrap();
        let b = generate_synthetic_sequence(
            &SyntheticWorldSpec {
                mirror: true,
                ..spec
            },
            21,
        )
        .unwrap();
        for (ga, gb) in a.future_grids.iter().zip(&b.future_grids) {
            let [nx, ny, nz] = ga.spec.dims;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        assert_eq!(ga.get([x, y, z]), gb.get([x, ny - 1 - y, z]));
                    }
                }
            }
        }
        for (wa, wb) in a.trajectory.iter().zip(&b.trajectory) {
            assert!((wa.y + wb.y).abs() < 1e-9 && (wa.theta + wb.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn renders_show_ground_below_and_sky_above_horizon() {
        let spec = SyntheticWorldSpec {
            static_boxes: 0,
            dynamic_boxes: 0,
            ..small_spec()
        };
        let s = generate_synthetic_sequence(&spec, 1).unwrap();
        let img = &s.past[0].images[0];
        assert_eq!(img.pixel(0, 0), SKY_COLOR);
        assert_eq!(
            img.pixel(0, img.height - 1),
            shade(class_color(classes::DRIVEABLE_SURFACE), GROUND_SHADE)
        );
    }

    #[test]
    fn crowded_bounds_are_rejected() {
        let spec = SyntheticWorldSpec {
            bounds: [[-1.0, -1.0], [1.0, 1.0]],
            static_boxes: 5,
            ..small_spec()
        };
        assert!(generate_synthetic_sequence(&spec, 0).is_err());
    }
}
