//! Rigid-body math, Euler angles and the pinhole camera model.
//!
//! Poses are stored as a translation in meters plus a unit quaternion in
//! `(w, x, y, z)` order. Quaternions are always renormalized and
//! canonicalized onto the `w >= 0` hemisphere, so two poses describing the
//! same transform compare equal componentwise (up to rounding).
//!
//! Euler angles follow the intrinsic Z-Y-X convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3-vector in meters (or a unitless direction, depending on context).
pub type Vec3 = [f64; 3];

/// Largest deviation of a quaternion norm from 1 accepted when a quaternion
/// is read from an external source.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Products drifting less than this from unit norm are left unscaled, so
/// exact products (e.g. with the identity) stay bit-exact.
const RENORM_THRESHOLD: f64 = 1e-12;

/// Pitch values within this distance of ±π/2 are treated as gimbal lock.
const GIMBAL_LOCK_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has non-finite components")]
    NonFiniteQuaternion,
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("quaternion norm {0} is not within {UNIT_NORM_TOLERANCE} of 1")]
    NotUnit(f64),
    #[error("translation has non-finite components")]
    NonFiniteTranslation,
    #[error("euler angles must be finite")]
    NonFiniteAngle,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

pub(crate) mod vec3 {
    use super::Vec3;

    pub fn add(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn scale(a: Vec3, s: f64) -> Vec3 {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn dot(a: Vec3, b: Vec3) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn norm(a: Vec3) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn is_finite(a: Vec3) -> bool {
        a.iter().all(|c| c.is_finite())
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped >= PI {
        -PI
    } else {
        wrapped
    }
}

/// Unit quaternion on the canonical `w >= 0` hemisphere.
///
/// When `w == 0` the tie is broken by making the first nonzero of `x, y, z`
/// positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes an arbitrary nonzero quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if ![w, x, y, z].iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFiniteQuaternion);
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    /// Like [`UnitQuaternion::new`], but rejects inputs whose norm is not
    /// already within [`UNIT_NORM_TOLERANCE`] of 1.
    pub fn from_unit(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let q = [w, x, y, z];
        if !q.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFiniteQuaternion);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(GeometryError::NotUnit(n));
        }
        Self::new(w, x, y, z)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else {
            [x, y, z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        // Adding 0.0 turns -0.0 into +0.0 so componentwise equality is stable.
        if flip {
            Self { w: -w + 0.0, x: -x + 0.0, y: -y + 0.0, z: -z + 0.0 }
        } else {
            Self { w: w + 0.0, x: x + 0.0, y: y + 0.0, z: z + 0.0 }
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, GeometryError> {
        let n = vec3::norm(axis);
        if !n.is_finite() || !angle.is_finite() {
            return Err(GeometryError::NonFiniteQuaternion);
        }
        if n == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let k = s / n;
        Self::new(c, axis[0] * k, axis[1] * k, axis[2] * k)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// Components in `(w, x, y, z)` order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs` (apply `rhs` first), renormalized.
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if (n - 1.0).abs() <= RENORM_THRESHOLD {
            Self::canonical(w, x, y, z)
        } else {
            Self::canonical(w / n, x / n, y / n, z / n)
        }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let u = [self.x, self.y, self.z];
        let uv = vec3::cross(u, v);
        let uuv = vec3::cross(u, uv);
        vec3::add(v, vec3::add(vec3::scale(uv, 2.0 * self.w), vec3::scale(uuv, 2.0)))
    }

    /// Row-major 3×3 rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = *self;
        [
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
        ]
    }

    /// Shortest-arc spherical interpolation; `t = 0` gives `self`, `t = 1` gives `other`.
    pub fn slerp(&self, other: &Self, t: f64) -> Self {
        let mut d = self.dot(other);
        let mut b = other.to_array();
        if d < 0.0 {
            d = -d;
            b = b.map(|c| -c);
        }
        let a = self.to_array();
        let (ka, kb) = if d > 1.0 - 1e-12 {
            (1.0 - t, t)
        } else {
            let theta = d.min(1.0).acos();
            let s = theta.sin();
            (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s)
        };
        let q: Vec<f64> = (0..4).map(|i| ka * a[i] + kb * b[i]).collect();
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        Self::canonical(q[0] / n, q[1] / n, q[2] / n, q[3] / n)
    }
}

impl Serialize for UnitQuaternion {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for UnitQuaternion {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(deserializer)?;
        Self::from_unit(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

/// Intrinsic Z-Y-X Euler angles in radians, each wrapped into `[-π, π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Result<Self, GeometryError> {
        if !(roll.is_finite() && pitch.is_finite() && yaw.is_finite()) {
            return Err(GeometryError::NonFiniteAngle);
        }
        Ok(Self {
            roll: wrap_angle(roll),
            pitch: wrap_angle(pitch),
            yaw: wrap_angle(yaw),
        })
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }
}

pub fn euler_to_quat(e: &EulerAngles) -> UnitQuaternion {
    let (sr, cr) = (e.roll / 2.0).sin_cos();
    let (sp, cp) = (e.pitch / 2.0).sin_cos();
    let (sy, cy) = (e.yaw / 2.0).sin_cos();
    UnitQuaternion::new(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    )
    .expect("euler angles are finite")
}

/// Inverse of [`euler_to_quat`]. At gimbal lock the roll is pinned to zero
/// and the whole in-plane rotation is reported as yaw.
pub fn quat_to_euler(q: &UnitQuaternion) -> EulerAngles {
    let m = q.to_matrix();
    let cos_pitch = m[2][1].hypot(m[2][2]);
    let pitch = (-m[2][0]).atan2(cos_pitch);
    if cos_pitch <= GIMBAL_LOCK_EPS {
        let pitch = if m[2][0] < 0.0 { PI / 2.0 } else { -PI / 2.0 };
        let yaw = (-m[0][1]).atan2(m[1][1]);
        return EulerAngles { roll: 0.0, pitch, yaw: wrap_angle(yaw) };
    }
    EulerAngles {
        roll: wrap_angle(m[2][1].atan2(m[2][2])),
        pitch: wrap_angle(pitch),
        yaw: wrap_angle(m[1][0].atan2(m[0][0])),
    }
}

/// Rigid transform: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct Se3Pose {
    translation: Vec3,
    rotation: UnitQuaternion,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    translation: Vec3,
    rotation: UnitQuaternion,
}

impl TryFrom<RawPose> for Se3Pose {
    type Error = GeometryError;

    fn try_from(raw: RawPose) -> Result<Self, Self::Error> {
        Se3Pose::new(raw.translation, raw.rotation)
    }
}

impl From<Se3Pose> for RawPose {
    fn from(p: Se3Pose) -> Self {
        RawPose {
            translation: p.translation,
            rotation: p.rotation,
        }
    }
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Se3Pose {
    pub const IDENTITY: Se3Pose = Se3Pose {
        translation: [0.0; 3],
        rotation: UnitQuaternion::IDENTITY,
    };

    pub fn new(translation: Vec3, rotation: UnitQuaternion) -> Result<Self, GeometryError> {
        if !vec3::is_finite(translation) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        Ok(Self { translation, rotation })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        Self::new([x, y, z], UnitQuaternion::IDENTITY)
    }

    pub fn from_rotation(rotation: UnitQuaternion) -> Self {
        Self {
            translation: [0.0; 3],
            rotation,
        }
    }

    pub fn from_euler(translation: Vec3, euler: &EulerAngles) -> Result<Self, GeometryError> {
        Self::new(translation, euler_to_quat(euler))
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }

    pub fn euler(&self) -> EulerAngles {
        quat_to_euler(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose {
            translation: vec3::add(self.rotation.rotate(other.translation), self.translation),
            rotation: self.rotation.mul(&other.rotation),
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rotation = self.rotation.inverse();
        Se3Pose {
            translation: vec3::scale(rotation.rotate(self.translation), -1.0),
            rotation,
        }
    }

    pub fn transform_point(&self, x: Vec3) -> Vec3 {
        vec3::add(self.rotation.rotate(x), self.translation)
    }
}

/// Pinhole intrinsics. Image size is in whole pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = GeometryError;

    fn try_from(r: RawIntrinsics) -> Result<Self, Self::Error> {
        CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<CameraIntrinsics> for RawIntrinsics {
    fn from(k: CameraIntrinsics) -> Self {
        RawIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let invalid = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if width == 0 || height == 0 {
            return invalid(format!("image size {width}x{height} must be positive"));
        }
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return invalid(format!("focal lengths ({fx}, {fy}) must be positive"));
        }
        if !(cx >= 0.0 && cx < width as f64) {
            return invalid(format!("cx = {cx} outside [0, {width})"));
        }
        if !(cy >= 0.0 && cy < height as f64) {
            return invalid(format!("cy = {cy} outside [0, {height})"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Viewing ray `K⁻¹ [u, v, 1]ᵀ` for continuous pixel coordinates.
    ///
    /// The ray is left unnormalized so its z component is exactly 1 and a
    /// metric depth `d` along the optical axis maps to the point `d * ray`.
    pub fn compute_ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Dense `height × width × 3` field of rays sampled at pixel centers.
    pub fn raymap(&self) -> Array3<f64> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut out = Array3::zeros((h, w, 3));
        for v in 0..h {
            for u in 0..w {
                let r = self.compute_ray(u as f64 + 0.5, v as f64 + 0.5);
                for c in 0..3 {
                    out[[v, u, c]] = r[c];
                }
            }
        }
        out
    }
}

/// Camera pose relative to the robot base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraExtrinsics {
    /// Maps base-frame coordinates to camera-frame coordinates.
    pub pose_of_base_in_camera: Se3Pose,
}

impl CameraExtrinsics {
    pub fn new(pose_of_base_in_camera: Se3Pose) -> Self {
        Self { pose_of_base_in_camera }
    }

    pub fn base_to_camera(&self, pose_in_base: &Se3Pose) -> Se3Pose {
        self.pose_of_base_in_camera.compose(pose_in_base)
    }

    pub fn camera_to_base(&self, pose_in_camera: &Se3Pose) -> Se3Pose {
        self.pose_of_base_in_camera.inverse().compose(pose_in_camera)
    }
}
