//! Rotation and rigid-transform algebra on SO(3) and SE(3).
//!
//! Rotations are stored as 3x3 orthonormal matrices. Tangent vectors are
//! axis-angle 3-vectors in radians. Perturbations throughout the crate use the
//! right convention `R <- R * exp(dtheta)`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle exp/log switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality tolerance accepted by [`log_so3`] and [`Rotation3::from_matrix`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Axis-angle rotation increment, radians.
pub type TangentVector3 = Vector3<f64>;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of SO(3) with matrix semantics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct Rotation3 {
    matrix: Matrix3<f64>,
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a matrix after checking `R Rᵀ = I` and `det R = 1` to [`ORTHONORMAL_TOL`].
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        check_orthonormal(&matrix)?;
        Ok(Self { matrix })
    }

    #[cfg(test)]
    pub(crate) fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Self { matrix }
    }

    /// Rotation from a quaternion given w-first. The quaternion is normalized.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Self {
            matrix: q.to_rotation_matrix().into_inner(),
        }
    }

    /// Quaternion `[w, x, y, z]` with non-negative w.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.matrix);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Rodrigues formula, second-order Taylor below [`SMALL_ANGLE`].
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let w = skew(omega);
        let matrix = if theta < SMALL_ANGLE {
            Matrix3::identity() + w + 0.5 * w * w
        } else {
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / theta2;
            Matrix3::identity() + a * w + b * w * w
        };
        Self { matrix }
    }

    /// Axis-angle vector with angle in [0, π].
    pub fn log(&self) -> Vector3<f64> {
        let r = &self.matrix;
        let axis_sin = vee(&(r - r.transpose())) * 0.5;
        let s = axis_sin.norm();
        let c = 0.5 * (r.trace() - 1.0);
        let theta = s.atan2(c);
        if theta < SMALL_ANGLE {
            return axis_sin;
        }
        if theta > PI - 1e-2 {
            // aaᵀ = (sym(R) - cosθ I) / (1 - cosθ); take the largest diagonal for the axis.
            let sym = 0.5 * (r + r.transpose());
            let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
            let k = (0..3)
                .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
                .unwrap_or(0);
            let mut axis = outer.column(k) / outer[(k, k)].sqrt();
            if axis.dot(&axis_sin) < 0.0 {
                axis = -axis;
            }
            return axis.normalize() * theta;
        }
        axis_sin * (theta / s)
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    #[inline]
    pub fn compose(&self, other: &Rotation3) -> Self {
        Self {
            matrix: self.matrix * other.matrix,
        }
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }

    /// Right retraction `self * exp(delta)`.
    #[inline]
    pub fn retract(&self, delta: &Vector3<f64>) -> Self {
        self.compose(&Self::exp(delta))
    }

    /// `log(selfᵀ * other)`, the right-tangent difference.
    pub fn local(&self, other: &Rotation3) -> Vector3<f64> {
        self.inverse().compose(other).log()
    }

    /// Geodesic interpolation, `t = 0` gives `self`.
    pub fn slerp(&self, other: &Rotation3, t: f64) -> Self {
        self.retract(&(self.local(other) * t))
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Re-orthonormalizes through the quaternion, removing accumulated drift.
    pub fn normalized(&self) -> Self {
        let [w, x, y, z] = self.to_quaternion();
        Self::from_quaternion(w, x, y, z)
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        self.compose(&rhs)
    }
}

impl From<Rotation3> for [f64; 4] {
    fn from(r: Rotation3) -> Self {
        r.to_quaternion()
    }
}

impl TryFrom<[f64; 4]> for Rotation3 {
    type Error = Error;
    fn try_from(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidArgument(format!("degenerate quaternion {q:?}")));
        }
        Ok(Self::from_quaternion(q[0], q[1], q[2], q[3]))
    }
}

fn check_orthonormal(m: &Matrix3<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("rotation has non-finite entries".into()));
    }
    let defect = (m * m.transpose() - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if defect > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidArgument(format!(
            "matrix is not a rotation (orthonormality defect {defect:.3e}, det {det:.6})"
        )));
    }
    Ok(())
}

/// Exponential map with input validation.
pub fn exp_so3(omega: &TangentVector3) -> Result<Rotation3> {
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite tangent vector {omega:?}")));
    }
    Ok(Rotation3::exp(omega))
}

/// Logarithm map with input validation.
pub fn log_so3(rotation: &Rotation3) -> Result<TangentVector3> {
    check_orthonormal(rotation.matrix())?;
    Ok(rotation.log())
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * w + w * w / 6.0;
    }
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * w + (theta - theta.sin()) / (theta2 * theta) * w * w
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * w + w * w / 12.0;
    }
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * w + coeff * w * w
}

/// Rigid transform taking body-frame points into the world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let rotation = self.rotation.inverse();
        Pose3 {
            translation: -rotation.rotate(&self.translation),
            rotation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Linear translation and geodesic rotation interpolation.
    pub fn interpolate(&self, other: &Pose3, t: f64) -> Pose3 {
        Pose3 {
            rotation: self.rotation.slerp(&other.rotation, t),
            translation: self.translation + (other.translation - self.translation) * t,
        }
    }
}

pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.compose(b)
}

pub fn inverse(a: &Pose3) -> Pose3 {
    a.inverse()
}

pub fn rotate(rotation: &Rotation3, v: &Vector3<f64>) -> Vector3<f64> {
    rotation.rotate(v)
}
