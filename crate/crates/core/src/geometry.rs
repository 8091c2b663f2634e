//! Rigid poses, pinhole cameras and point projection.
//!
//! Ego frames follow the driving convention x forward, y left, z up. Camera
//! frames are optical: x right, y down, z along the viewing direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

impl Pose {
    pub const fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation about +z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Planar pose at `(x, y, 0)` with heading `yaw`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            translation: [x, y, 0.0],
            ..Self::from_yaw(yaw)
        }
    }

    /// Heading of the x axis in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    pub fn inverse(&self) -> Pose {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Parses a homogeneous matrix, rejecting non-rigid rotations.
    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Pose> {
        let rotation = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        let pose = Pose {
            rotation,
            translation: [m[0][3], m[1][3], m[2][3]],
        };
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::config(
                "pose",
                "last row of a homogeneous matrix must be [0, 0, 0, 1]",
            ));
        }
        pose.validate()?;
        Ok(pose)
    }

    /// Checks orthonormality and a positive determinant within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let rrt = mat_mul(&self.rotation, &transpose(&self.rotation));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-6 {
                    return Err(Error::config(
                        "pose.rotation",
                        "rotation is not orthonormal",
                    ));
                }
            }
        }
        if (det(&self.rotation) - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "pose.rotation",
                "rotation determinant is not +1",
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::config(
                "pose.translation",
                "translation is not finite",
            ));
        }
        Ok(())
    }

    /// Largest absolute entry difference between homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let (a, b) = (self.to_matrix(), other.to_matrix());
        let mut m: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                m = m.max((a[i][j] - b[i][j]).abs());
            }
        }
        m
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let rotation = mat_mul(&a.rotation, &b.rotation);
    let t = a.transform_point(&b.translation);
    Pose {
        rotation,
        translation: t,
    }
}

/// Pose `r` with `compose(to, r) == from`, i.e. `from` expressed relative to `to`.
pub fn relative_pose(from: &Pose, to: &Pose) -> Pose {
    compose(&to.inverse(), from)
}

/// Pinhole intrinsics plus the camera-to-ego extrinsic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_ego: Pose,
}

/// Optical-frame rotation for a camera looking along ego +x.
pub const FORWARD_OPTICAL: Mat3 = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];

impl CameraCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(
                "calib.fx/fy",
                "focal lengths must be positive",
            ));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::config(
                "calib.cx",
                "principal point must lie inside the image",
            ));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::config(
                "calib.cy",
                "principal point must lie inside the image",
            ));
        }
        self.cam_to_ego.validate()
    }

    /// Camera mounted at `position` (ego frame) looking horizontally at
    /// heading `yaw`, with horizontal field of view `hfov` radians.
    pub fn looking_at_yaw(
        width: usize,
        height: usize,
        hfov: f64,
        position: Vec3,
        yaw: f64,
    ) -> Self {
        let fx = width as f64 / 2.0 / (hfov / 2.0).tan();
        let rotation = mat_mul(&Pose::from_yaw(yaw).rotation, &FORWARD_OPTICAL);
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            cam_to_ego: Pose {
                rotation,
                translation: position,
            },
        }
    }

    /// Pixel and depth of a camera-frame point (depth clamped away from zero
    /// so pixels of invalid points stay finite).
    pub fn pixel(&self, pc: &Vec3, near: f64) -> ([f64; 2], f64) {
        let z = pc[2];
        let zs = if z > near { z } else { near };
        (
            [
                self.fx * pc[0] / zs + self.cx,
                self.fy * pc[1] / zs + self.cy,
            ],
            z,
        )
    }

    pub fn in_image(&self, px: &[f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width as f64 && px[1] >= 0.0 && px[1] < self.height as f64
    }

    /// Camera-frame direction of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Projection settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Minimum camera-frame depth for a valid projection, meters.
    pub near: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { near: 0.1 }
    }
}

/// Result of [`project_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Transform taking target-ego coordinates into a camera of the source frame.
pub fn target_to_camera(calib: &CameraCalib, ego_target: &Pose, ego_source: &Pose) -> Pose {
    let target_to_source = relative_pose(ego_target, ego_source);
    compose(&calib.cam_to_ego.inverse(), &target_to_source)
}

/// Projects target-ego points into a camera attached to the source ego frame.
/// Both ego poses map ego coordinates to a shared world frame.
pub fn project_points(
    points: &[Vec3],
    calib: &CameraCalib,
    ego_target: &Pose,
    ego_source: &Pose,
    cfg: &ProjectionConfig,
) -> Projection {
    let chain = target_to_camera(calib, ego_target, ego_source);
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        depth: Vec::with_capacity(points.len()),
        valid: Vec::with_capacity(points.len()),
    };
    for p in points {
        let pc = chain.transform_point(p);
        let (px, depth) = calib.pixel(&pc, cfg.near);
        out.valid.push(depth > cfg.near && calib.in_image(&px));
        out.pixels.push(px);
        out.depth.push(depth);
    }
    out
}

/// Inverse of [`project_points`] for one pixel with known depth.
pub fn unproject(
    px: &[f64; 2],
    depth: f64,
    calib: &CameraCalib,
    ego_target: &Pose,
    ego_source: &Pose,
) -> Vec3 {
    let d = calib.ray_direction(px[0], px[1]);
    let pc = [d[0] * depth, d[1] * depth, depth];
    target_to_camera(calib, ego_target, ego_source)
        .inverse()
        .transform_point(&pc)
}

/// Signed axis permutation used to bring foreign frame conventions into the
/// x-forward, y-left, z-up ego convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMap {
    /// Entry `i` names the source axis (0, 1, 2) feeding target axis `i`.
    pub source: [usize; 3],
    pub sign: [i8; 3],
}

impl Default for AxisMap {
    fn default() -> Self {
        Self {
            source: [0, 1, 2],
            sign: [1, 1, 1],
        }
    }
}

impl AxisMap {
    fn matrix(&self) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            m[i][self.source[i]] = f64::from(self.sign[i]);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &s in &self.source {
            if s > 2 || seen[s] {
                return Err(Error::config(
                    "axis_map.source",
                    "must be a permutation of 0, 1, 2",
                ));
            }
            seen[s] = true;
        }
        if self.sign.iter().any(|s| s.abs() != 1) {
            return Err(Error::config("axis_map.sign", "signs must be ±1"));
        }
        if det(&self.matrix()) < 0.0 {
            return Err(Error::config("axis_map", "map must preserve handedness"));
        }
        Ok(())
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        mat_vec(&self.matrix(), p)
    }

    /// Re-expresses a pose whose both frames follow the source convention.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let a = self.matrix();
        Pose {
            rotation: mat_mul(&mat_mul(&a, &pose.rotation), &transpose(&a)),
            translation: mat_vec(&a, &pose.translation),
        }
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
