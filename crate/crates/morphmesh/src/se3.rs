//! Rotations, quaternions, and rigid poses.
//!
//! Conventions used across the crate:
//!
//! - Quaternion components are ordered `(w, x, y, z)` (scalar first)
//!   everywhere: in memory, in JSON, and in CSV columns.
//! - The Hamilton product convention: `(w1, v1) * (w2, v2) =
//!   (w1*w2 - v1.v2, w1*v2 + w2*v1 + v1 x v2)`.
//! - Angular velocities are expressed in the world frame unless a function
//!   says otherwise, so `R_dot = skew(omega) * R`.
//! - Angles are radians in every API; degrees appear only at configuration
//!   boundaries (scenario files, CLI output) and are converted on load.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Tolerance for accepting a quaternion as unit length in conversions.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Tolerance the [`UnitQuaternion`] constructors guarantee on their output.
pub const UNIT_NORM_INVARIANT: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum Se3Error {
    /// A conversion expected a unit quaternion but the norm deviated from 1
    /// by more than [`UNIT_NORM_TOL`].
    #[error("quaternion norm {norm} deviates from 1 beyond tolerance {tol}")]
    NonUnitQuaternion { norm: f64, tol: f64 },
    /// A quaternion with norm too close to zero cannot be normalized.
    #[error("cannot normalize quaternion with norm {0}")]
    DegenerateQuaternion(f64),
}

/// A raw quaternion with no unit-norm invariant.
///
/// Integrators work on this type: the time derivative of an orientation
/// state drifts off the unit sphere between renormalizations, and the
/// normalization feedback term in [`quat_derivative`] only makes sense on
/// non-unit values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (w1, v1) = (self.w, Vector3::new(self.x, self.y, self.z));
        let (w2, v2) = (rhs.w, Vector3::new(rhs.x, rhs.y, rhs.z));
        let w = w1 * w2 - v1.dot(&v2);
        let v = w1 * v2 + w2 * v1 + v1.cross(&v2);
        Quat::new(w, v.x, v.y, v.z)
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scale(&self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, rhs: &Quat) -> Quat {
        Quat::new(
            self.w + rhs.w,
            self.x + rhs.x,
            self.y + rhs.y,
            self.z + rhs.z,
        )
    }

    /// Normalizes to a [`UnitQuaternion`]; errors on norms below 1e-12.
    pub fn normalize(&self) -> Result<UnitQuaternion, Se3Error> {
        let n = self.norm();
        if n < 1e-12 {
            return Err(Se3Error::DegenerateQuaternion(n));
        }
        Ok(UnitQuaternion(self.scale(1.0 / n)))
    }

    /// Rotation matrix of a quaternion that is unit length within
    /// [`UNIT_NORM_TOL`]; errors otherwise.
    pub fn to_rotation(&self) -> Result<Matrix3<f64>, Se3Error> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Se3Error::NonUnitQuaternion {
                norm: n,
                tol: UNIT_NORM_TOL,
            });
        }
        Ok(rotation_from_components(self.w, self.x, self.y, self.z))
    }
}

/// A quaternion guaranteed unit length within [`UNIT_NORM_INVARIANT`] by
/// every constructor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion(Quat);

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self(Quat::identity())
    }

    /// Normalizing constructor; errors on degenerate input.
    pub fn new_normalize(q: Quat) -> Result<Self, Se3Error> {
        q.normalize()
    }

    /// Quaternion for a rotation of `angle` radians about `axis`.
    ///
    /// A zero axis yields the identity when `angle * ||axis||` vanishes;
    /// otherwise the axis is normalized first.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n * angle.abs() < 1e-300 {
            return Self::identity();
        }
        let half = 0.5 * angle;
        let u = axis / n;
        let s = half.sin();
        Self(Quat::new(half.cos(), s * u.x, s * u.y, s * u.z))
    }

    /// Quaternion for the rotation vector `omega * dt` (axis `omega`, angle
    /// `||omega|| * dt`).
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    pub fn w(&self) -> f64 {
        self.0.w
    }
    pub fn x(&self) -> f64 {
        self.0.x
    }
    pub fn y(&self) -> f64 {
        self.0.y
    }
    pub fn z(&self) -> f64 {
        self.0.z
    }

    /// The raw components, e.g. for integration or serialization.
    pub fn as_quat(&self) -> Quat {
        self.0
    }

    pub fn conjugate(&self) -> UnitQuaternion {
        UnitQuaternion(self.0.conjugate())
    }

    /// Hamilton product of two unit quaternions, renormalized to keep the
    /// invariant under long products.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        self.0
            .mul(&rhs.0)
            .normalize()
            .expect("product of unit quaternions cannot be degenerate")
    }

    /// Rotation matrix (infallible: the unit invariant holds by
    /// construction).
    pub fn to_rotation(&self) -> Matrix3<f64> {
        rotation_from_components(self.0.w, self.0.x, self.0.y, self.0.z)
    }
}

/// Rigid pose of one node: position of its center and orientation of its
/// body frame, both in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.orientation.to_rotation()
    }
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v x w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn rotation_from_components(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    // Normalized Euler-Rodrigues form; exact for unit quaternions and
    // first-order insensitive to small norm drift.
    let s = 2.0 / (w * w + x * x + y * y + z * z);
    Matrix3::new(
        1.0 - s * (y * y + z * z),
        s * (x * y - w * z),
        s * (x * z + w * y),
        s * (x * y + w * z),
        1.0 - s * (x * x + z * z),
        s * (y * z - w * x),
        s * (x * z - w * y),
        s * (y * z + w * x),
        1.0 - s * (x * x + y * y),
    )
}

/// Unit quaternion of a rotation matrix (Shepperd's method: branches on the
/// largest of trace and diagonal entries for numerical safety).
///
/// The result has non-negative scalar part; `q` and `-q` encode the same
/// rotation and this picks one representative deterministically.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> UnitQuaternion {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quat::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = if q.w < 0.0 { q.scale(-1.0) } else { q };
    q.normalize().expect("rotation matrix yields non-degenerate quaternion")
}

/// Rotation vector (axis times angle, in `[0, pi]`) of a rotation matrix:
/// the logarithm map of SO(3).
///
/// Used as the 3-parameter orientation error of rigidly constrained nodes.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = rotation_to_quat(r);
    let v = Vector3::new(q.x(), q.y(), q.z());
    let s = v.norm();
    let c = q.w();
    if s < 1e-12 {
        // Identity (w = +1 by the sign convention of rotation_to_quat);
        // first-order series of 2*atan2(s, c)/s.
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(c);
    v * (angle / s)
}

/// Time derivative of a quaternion under world-frame angular velocity
/// `omega`, with a normalization feedback term:
///
/// `q_dot = 0.5 * (0, omega) * q + baumgarte_gain * (1 - ||q||^2) * q`
///
/// The feedback term vanishes on unit quaternions and pulls drifting norms
/// back toward 1 during integration, so `q` may be non-unit here.
pub fn quat_derivative(q: &Quat, omega_world: &Vector3<f64>, baumgarte_gain: f64) -> Quat {
    let omega_q = Quat::new(0.0, omega_world.x, omega_world.y, omega_world.z);
    let kinematic = omega_q.mul(q).scale(0.5);
    let n2 = q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z;
    kinematic.add(&q.scale(baumgarte_gain * (1.0 - n2)))
}
