//! Quaternion, Euler-angle and pinhole-camera primitives.
//!
//! Euler angles follow the Tait-Bryan z-y'-x'' sequence: yaw about z, then
//! pitch about the new y, then roll about the resulting x. Equivalently
//! `q = q_z(yaw) * q_y(pitch) * q_x(roll)`. Every file format that carries
//! Euler angles goes through [`quat_from_euler`] / [`euler_from_quat`].
//!
//! Quaternions are stored and serialized in `(w, x, y, z)` order. Nothing in
//! this module forces a canonical sign; double-cover handling lives in
//! [`angular_error`] and in the losses.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm below which a quaternion cannot be normalized.
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Distance from ±π/2 pitch at which Euler extraction reports gimbal lock.
pub const GIMBAL_LOCK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("quaternion norm {0:e} is too small to normalize")]
    ZeroNorm(f64),
    #[error("point with z = {0} is behind the camera")]
    BehindCamera(f64),
    #[error("depth z = {0} must be positive")]
    NonPositiveDepth(f64),
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: need x1 < x2 and y1 < y2")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self, GeometryError> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < MIN_QUAT_NORM {
            return Err(GeometryError::ZeroNorm(n));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n))
    }

    /// Rotates `v` by this (unit) quaternion.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let u = [self.x, self.y, self.z];
        let t = cross(u, v).map(|c| 2.0 * c);
        let ut = cross(u, t);
        [
            v[0] + self.w * t[0] + ut[0],
            v[1] + self.w * t[1] + ut[1],
            v[2] + self.w * t[2] + ut[2],
        ]
    }
}

/// Hamilton product.
impl std::ops::Mul for Quaternion {
    type Output = Self;

    fn mul(self, b: Self) -> Self {
        let a = self;
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Self;

    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn quat_normalize(q: Quaternion) -> Result<Quaternion, GeometryError> {
    let n = q.norm();
    if !(n >= MIN_QUAT_NORM) {
        return Err(GeometryError::ZeroNorm(n));
    }
    Ok(q.scale(1.0 / n))
}

/// Like [`quat_normalize`] but returns `q` untouched when it is already unit
/// length to within a few ulps, so stored values survive a reload bit-for-bit.
pub fn quat_normalize_if_needed(q: Quaternion) -> Result<Quaternion, GeometryError> {
    if (q.dot(&q) - 1.0).abs() <= 1e-14 {
        Ok(q)
    } else {
        quat_normalize(q)
    }
}

/// Roll, pitch and yaw in radians, each wrapped to (-π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }
}

/// Result of [`euler_from_quat`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerConversion {
    pub angles: EulerAngles,
    /// Pitch is within [`GIMBAL_LOCK_EPS`] of ±π/2; roll is then pinned to 0
    /// and the remaining rotation is folded into yaw.
    pub gimbal_lock: bool,
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        PI
    } else {
        r
    }
}

pub fn quat_from_euler(e: EulerAngles) -> Quaternion {
    let (sr, cr) = (e.roll / 2.0).sin_cos();
    let (sp, cp) = (e.pitch / 2.0).sin_cos();
    let (sy, cy) = (e.yaw / 2.0).sin_cos();
    Quaternion::new(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    )
}

pub fn euler_from_quat(q: Quaternion) -> EulerConversion {
    let Quaternion { w, x, y, z } = q;
    let sin_pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
    let pitch = sin_pitch.asin();
    if FRAC_PI_2 - pitch.abs() <= GIMBAL_LOCK_EPS {
        let yaw = wrap_angle(2.0 * z.atan2(w));
        return EulerConversion {
            angles: EulerAngles::new(0.0, FRAC_PI_2.copysign(pitch), yaw),
            gimbal_lock: true,
        };
    }
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
    EulerConversion {
        angles: EulerAngles::new(wrap_angle(roll), pitch, wrap_angle(yaw)),
        gimbal_lock: false,
    }
}

/// Geodesic rotation distance `2·arccos(|q_gt · q_pred|)`, in [0, π].
///
/// Both inputs are normalized first. The value is evaluated through the
/// equivalent half-angle form `4·atan2(|a − b|, |a + b|)` with `b` moved to
/// `a`'s hemisphere, which is exact at zero error where the arccos form loses
/// about eight digits.
pub fn angular_error(q_gt: Quaternion, q_pred: Quaternion) -> f64 {
    let a = quat_normalize(q_gt).unwrap_or(q_gt);
    let mut b = quat_normalize(q_pred).unwrap_or(q_pred);
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    let diff = Quaternion::new(a.w - b.w, a.x - b.x, a.y - b.y, a.z - b.z).norm();
    let sum = Quaternion::new(a.w + b.w, a.x + b.x, a.y + b.y, a.z + b.z).norm();
    (4.0 * diff.atan2(sum)).clamp(0.0, PI)
}

/// Position in the camera frame, meters. `z` points along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Translation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Translation {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Self) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Translation,
}

impl Pose {
    pub fn new(rotation: Quaternion, translation: Translation) -> Self {
        Self { rotation, translation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("fx must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("fy must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(())
    }
}

pub fn project(p: Translation, k: &CameraIntrinsics) -> Result<(f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Inverse of [`project`] at a known depth.
pub fn backproject(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Result<Translation, GeometryError> {
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(Translation::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z))
}

/// Axis-aligned pixel box with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox2D {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = [x1, y1, x2, y2].iter().all(|c| c.is_finite());
        if !(finite && x1 < x2 && y1 < y2) {
            return Err(GeometryError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap with `other`, or `None` when the boxes do not overlap with
    /// positive area.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

pub fn bbox_center(b: &BBox2D) -> (f64, f64) {
    ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

/// Object-frame box dimensions in meters: width along x, height along y,
/// length along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxExtent {
    pub width: f64,
    pub height: f64,
    pub length: f64,
}

/// Fixed passenger-car extent: 4.5 m long, 1.8 m wide, 1.5 m tall.
pub const CAR_EXTENT: BoxExtent = BoxExtent { width: 1.8, height: 1.5, length: 4.5 };

impl BoxExtent {
    /// Distance from the box center to any corner.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * (self.width * self.width + self.height * self.height + self.length * self.length).sqrt()
    }

    fn corners(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..8).map(move |i| {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            [sx * self.width, sy * self.height, sz * self.length]
        })
    }
}

/// Projects the 3D box of an object and returns the smallest image box that
/// is centered on the projected object center and encloses every projected
/// corner. Centering makes `bbox_center` of the result equal to
/// `project(pose.translation)`.
pub fn project_centered_box(
    pose: &Pose,
    extent: &BoxExtent,
    k: &CameraIntrinsics,
) -> Result<BBox2D, GeometryError> {
    let (uc, vc) = project(pose.translation, k)?;
    let t = pose.translation;
    let (mut half_w, mut half_h) = (0.0f64, 0.0f64);
    for c in extent.corners() {
        let r = pose.rotation.rotate(c);
        let (u, v) = project(Translation::new(r[0] + t.x, r[1] + t.y, r[2] + t.z), k)?;
        half_w = half_w.max((u - uc).abs());
        half_h = half_h.max((v - vc).abs());
    }
    BBox2D::new(uc - half_w, vc - half_h, uc + half_w, vc + half_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0).unwrap()
    }

    fn assert_quat_eq(a: Quaternion, b: Quaternion, tol: f64) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert_abs_diff_eq!(*x, y, epsilon = tol);
        }
    }

    fn same_up_to_sign(a: Quaternion, b: Quaternion, tol: f64) -> bool {
        let close = |s: f64| a.to_array().iter().zip(b.to_array()).all(|(x, y)| (x - s * y).abs() <= tol);
        close(1.0) || close(-1.0)
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(quat_normalize(Quaternion::IDENTITY).unwrap(), Quaternion::IDENTITY);
        assert_eq!(quat_normalize(Quaternion::new(2.0, 0.0, 0.0, 0.0)).unwrap(), Quaternion::IDENTITY);
        let q = quat_normalize(Quaternion::new(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_quat_eq(q, Quaternion::new(0.5, 0.5, 0.5, 0.5), 1e-15);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            quat_normalize(Quaternion::new(0.0, 0.0, 0.0, 0.0)),
            Err(GeometryError::ZeroNorm(_))
        ));
        assert!(quat_normalize(Quaternion::new(1e-13, 0.0, 0.0, 0.0)).is_err());
        assert!(quat_normalize(Quaternion::new(f64::NAN, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn euler_examples() {
        assert_quat_eq(quat_from_euler(EulerAngles::new(0.0, 0.0, 0.0)), Quaternion::IDENTITY, 0.0);
        assert_quat_eq(
            quat_from_euler(EulerAngles::new(PI, 0.0, 0.0)),
            Quaternion::new(0.0, 1.0, 0.0, 0.0),
            1e-12,
        );
        assert_quat_eq(
            quat_from_euler(EulerAngles::new(PI / 2.0, 0.0, 0.0)),
            Quaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0),
            1e-15,
        );
    }

    #[test]
    fn euler_axes_follow_convention() {
        // yaw turns about z, pitch about y
        let yaw = quat_from_euler(EulerAngles::new(0.0, 0.0, PI / 2.0));
        let v = yaw.rotate([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        let pitch = quat_from_euler(EulerAngles::new(0.0, PI / 2.0, 0.0));
        let v = pitch.rotate([0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gimbal_lock_is_flagged_and_still_reconstructs() {
        let e = EulerAngles::new(0.3, FRAC_PI_2, -0.4);
        let q = quat_from_euler(e);
        let c = euler_from_quat(q);
        assert!(c.gimbal_lock);
        assert_eq!(c.angles.roll, 0.0);
        assert!(same_up_to_sign(quat_from_euler(c.angles), q, 1e-9));

        let q = quat_from_euler(EulerAngles::new(0.3, -FRAC_PI_2, 0.9));
        let c = euler_from_quat(q);
        assert!(c.gimbal_lock);
        assert!(same_up_to_sign(quat_from_euler(c.angles), q, 1e-9));

        assert!(!euler_from_quat(quat_from_euler(EulerAngles::new(0.0, 1.5, 0.0))).gimbal_lock);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.25), 0.25, epsilon = 0.0);
    }

    #[test]
    fn angular_error_examples() {
        let q = quat_normalize(Quaternion::new(0.3, -0.2, 0.9, 0.1)).unwrap();
        assert_eq!(angular_error(q, q), 0.0);
        assert_eq!(angular_error(Quaternion::IDENTITY, -Quaternion::IDENTITY), 0.0);
        let e = angular_error(Quaternion::IDENTITY, Quaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0));
        assert_abs_diff_eq!(e, PI / 2.0, epsilon = 1e-12);
        // half turn is the maximum
        assert_abs_diff_eq!(
            angular_error(Quaternion::IDENTITY, Quaternion::new(0.0, 0.0, 1.0, 0.0)),
            PI,
            epsilon = 1e-12
        );
    }

    #[test]
    fn angular_error_agrees_with_arccos_form() {
        let a = quat_normalize(Quaternion::new(0.9, 0.1, -0.3, 0.2)).unwrap();
        let b = quat_normalize(Quaternion::new(-0.2, 0.7, 0.1, 0.4)).unwrap();
        let direct = 2.0 * a.dot(&b).abs().clamp(-1.0, 1.0).acos();
        assert_abs_diff_eq!(angular_error(a, b), direct, epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        let k = k();
        assert_eq!(project(Translation::new(0.0, 0.0, 10.0), &k).unwrap(), (960.0, 540.0));
        assert_eq!(project(Translation::new(2.0, 1.0, 10.0), &k).unwrap(), (1160.0, 640.0));
        assert_eq!(project(Translation::new(-2.0, -1.0, 10.0), &k).unwrap(), (760.0, 440.0));
        assert!(matches!(
            project(Translation::new(0.0, 0.0, 0.0), &k),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn backproject_examples() {
        let k = k();
        assert_eq!(backproject(960.0, 540.0, 10.0, &k).unwrap(), Translation::new(0.0, 0.0, 10.0));
        assert_eq!(backproject(1160.0, 640.0, 10.0, &k).unwrap(), Translation::new(2.0, 1.0, 10.0));
        assert!(matches!(
            backproject(960.0, 540.0, -1.0, &k),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn bbox_center_examples() {
        assert_eq!(bbox_center(&BBox2D::new(0.0, 0.0, 2.0, 2.0).unwrap()), (1.0, 1.0));
        assert_eq!(bbox_center(&BBox2D::new(10.0, 20.0, 30.0, 60.0).unwrap()), (20.0, 40.0));
        assert!(matches!(
            BBox2D::new(5.0, 5.0, 5.0, 9.0),
            Err(GeometryError::DegenerateBox { .. })
        ));
        assert!(BBox2D::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn centered_box_is_centered_on_projection() {
        let k = k();
        let pose = Pose::new(
            quat_from_euler(EulerAngles::new(0.05, 0.7, -0.02)),
            Translation::new(3.0, 1.2, 25.0),
        );
        let b = project_centered_box(&pose, &CAR_EXTENT, &k).unwrap();
        let (u, v) = project(pose.translation, &k).unwrap();
        let (cu, cv) = bbox_center(&b);
        assert_abs_diff_eq!(cu, u, epsilon = 1e-9);
        assert_abs_diff_eq!(cv, v, epsilon = 1e-9);
        // a car at 25 m spans tens of pixels
        assert!(b.width() > 50.0 && b.height() > 40.0);
    }

    #[test]
    fn centered_box_rejects_corners_behind_camera() {
        let pose = Pose::new(Quaternion::IDENTITY, Translation::new(0.0, 0.0, 1.0));
        assert!(project_centered_box(&pose, &CAR_EXTENT, &k()).is_err());
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("nonzero", |a| a.iter().map(|c| c * c).sum::<f64>() > 1e-3)
            .prop_map(|a| quat_normalize(Quaternion::from_array(a)).unwrap())
    }

    proptest! {
        #[test]
        fn angular_error_identities(a in unit_quat(), b in unit_quat()) {
            prop_assert_eq!(angular_error(a, a), 0.0);
            prop_assert_eq!(angular_error(a, -a), 0.0);
            let e = angular_error(a, b);
            prop_assert!((0.0..=PI).contains(&e));
            prop_assert!((e - angular_error(b, a)).abs() <= 1e-12);
            prop_assert!((e - angular_error(a, -b)).abs() <= 1e-12);
        }

        #[test]
        fn angular_error_left_invariant(a in unit_quat(), b in unit_quat(), r in unit_quat()) {
            let e = angular_error(a, b);
            let e_r = angular_error(r * a, r * b);
            prop_assert!((e - e_r).abs() <= 1e-9, "{} vs {}", e, e_r);
        }

        #[test]
        fn backproject_inverts_project(
            x in -50.0f64..50.0, y in -50.0f64..50.0, z in 1.0f64..100.0
        ) {
            let k = k();
            let p = Translation::new(x, y, z);
            let (u, v) = project(p, &k).unwrap();
            let back = backproject(u, v, z, &k).unwrap();
            prop_assert!(back.distance(&p) <= 1e-9);
            prop_assert_eq!(back.z, z);
        }

        #[test]
        fn euler_round_trip(q in unit_quat()) {
            let c = euler_from_quat(q);
            prop_assume!(!c.gimbal_lock);
            let a = c.angles;
            for angle in [a.roll, a.pitch, a.yaw] {
                prop_assert!(angle > -PI && angle <= PI);
            }
            prop_assert!(same_up_to_sign(quat_from_euler(a), q, 1e-9));
        }

        #[test]
        fn euler_angles_round_trip(
            roll in -3.1f64..3.1, pitch in -1.5f64..1.5, yaw in -3.1f64..3.1
        ) {
            let e = EulerAngles::new(roll, pitch, yaw);
            let back = euler_from_quat(quat_from_euler(e)).angles;
            prop_assert!((back.roll - roll).abs() <= 1e-9);
            prop_assert!((back.pitch - pitch).abs() <= 1e-9);
            prop_assert!((back.yaw - yaw).abs() <= 1e-9);
        }
    }
}
