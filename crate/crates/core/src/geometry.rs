//! Small fixed-size linear algebra for poses and points.
//!
//! Sensor frame convention: x forward, y left, z up. Azimuth 0 lies along
//! +x and increases counter-clockwise seen from above.

use core::ops::{Add, Mul, Neg, Sub};

use crate::math;

/// Tolerance used when checking that a rotation is orthonormal.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(from = "[f64; 3]", into = "[f64; 3]"))]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        math::sqrt(self.norm_sq())
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    #[inline]
    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    /// Horizontal (xy-plane) distance from the origin.
    #[inline]
    pub fn horizontal_norm(self) -> f64 {
        math::sqrt(self.x * self.x + self.y * self.y)
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [f64; 9]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// Rotation about +z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (math::sin(yaw), math::cos(yaw));
        Mat3([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    /// `self^T * v`.
    #[inline]
    pub fn mul_vec_transposed(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let (a, b) = (&self.0, &o.0);
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Orthonormal with determinant +1, within `tol` per entry of `R^T R - I`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        if self.0.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let rtr = self.transpose().mul_mat(self);
        let ortho = rtr
            .0
            .iter()
            .zip(Mat3::IDENTITY.0.iter())
            .all(|(a, b)| math::abs(a - b) <= tol);
        ortho && math::abs(self.determinant() - 1.0) <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("rotation is not orthonormal with determinant +1")]
pub struct InvalidRotation;

/// Sensor-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pose {
    /// World position of the sensor origin, meters.
    pub position: Vec3,
    /// Row-major rotation, sensor-to-world.
    pub rotation: [f64; 9],
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: Vec3::ZERO, rotation: Mat3::IDENTITY.0 };

    pub fn new(position: Vec3, rotation: [f64; 9]) -> Result<Self, InvalidRotation> {
        let pose = Pose { position, rotation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_yaw(position: Vec3, yaw: f64) -> Self {
        Pose { position, rotation: Mat3::from_yaw(yaw).0 }
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Mat3 {
        Mat3(self.rotation)
    }

    pub fn validate(&self) -> Result<(), InvalidRotation> {
        if self.rotation_matrix().is_rotation(ROTATION_TOLERANCE) && self.position.is_finite() {
            Ok(())
        } else {
            Err(InvalidRotation)
        }
    }

    /// Sensor frame to world frame.
    #[inline]
    pub fn to_world(&self, p: Vec3) -> Vec3 {
        self.rotation_matrix().mul_vec(p) + self.position
    }

    /// World frame to sensor frame.
    #[inline]
    pub fn to_sensor(&self, p: Vec3) -> Vec3 {
        self.rotation_matrix().mul_vec_transposed(p - self.position)
    }

    /// Rotate a direction from sensor to world frame.
    #[inline]
    pub fn direction_to_world(&self, d: Vec3) -> Vec3 {
        self.rotation_matrix().mul_vec(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_rotation_is_valid() {
        for k in 0..16 {
            let m = Mat3::from_yaw(k as f64 * 0.4);
            assert!(m.is_rotation(1e-12));
        }
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]);
        assert!(!m.is_rotation(1e-9));
        assert!(Pose::new(Vec3::ZERO, m.0).is_err());
        let skew = Mat3([1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(!skew.is_rotation(1e-9));
    }

    #[test]
    fn to_world_and_back() {
        let pose = Pose::from_yaw(Vec3::new(3.0, -2.0, 1.5), 0.7);
        let p = Vec3::new(1.0, 2.0, 3.0);
        let q = pose.to_sensor(pose.to_world(p));
        assert!(p.distance(q) < 1e-12);
    }
}
