//! SO(3)/SE(3) group operations, tangent-space maps, adjoints, and the
//! retraction used throughout the estimator.
//!
//! Rotations are stored as plain 3x3 matrices so that the adjoint and
//! Jacobian code stays transparent. Twists are ordered angular-first,
//! `vec(omega, v)`, and every 6-vector or 6x6 matrix in the crate follows
//! that ordering.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Below this angle (rad) the exp/log closed forms switch to their
/// second-order Taylor expansions to avoid catastrophic cancellation.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log` refuses rotations closer than this to a half turn; the branch
/// choice there is arbitrary and corrupts derivative checks.
pub const ANGLE_NEAR_PI_MARGIN: f64 = 1e-6;

/// Errors raised by manifold operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    /// Rotation angle is within [`ANGLE_NEAR_PI_MARGIN`] of pi, where the
    /// logarithm map is not continuous.
    #[error("rotation angle {angle} rad is within {ANGLE_NEAR_PI_MARGIN} of pi; log is ill-defined there")]
    AngleNearPi { angle: f64 },
    /// A matrix handed to [`TangentCovariance::new`] was not a valid
    /// covariance.
    #[error("invalid tangent covariance: asymmetry {asymmetry}, min eigenvalue {min_eigenvalue}")]
    InvalidCovariance { asymmetry: f64, min_eigenvalue: f64 },
}

/// An element of SO(3), stored as a 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation { matrix: Matrix3::identity() }
    }

    /// Wraps a matrix that is already orthonormal with determinant +1.
    /// No projection is applied; use [`Rotation::orthonormalized`] to clean
    /// up an almost-orthogonal matrix.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Self {
        Rotation { matrix }
    }

    /// Rotation about a (not necessarily unit) axis by `angle = ||axis_angle||`.
    pub fn from_axis_angle(axis_angle: &Vector3<f64>) -> Self {
        so3_exp(axis_angle)
    }

    /// Roll-pitch-yaw (x, then y, then z) convention: `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = so3_exp(&Vector3::new(roll, 0.0, 0.0));
        let ry = so3_exp(&Vector3::new(0.0, pitch, 0.0));
        let rz = so3_exp(&Vector3::new(0.0, 0.0, yaw));
        rz * ry * rx
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        Rotation { matrix: self.matrix.transpose() }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        let c = ((self.matrix.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Frobenius distance of `R^T R` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        (self.matrix.transpose() * self.matrix - Matrix3::identity()).norm()
    }

    /// Unit quaternion (w, x, y, z) with canonical sign (w >= 0).
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.matrix);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    /// Rotation from a (w, x, y, z) quaternion; the input is normalized.
    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Self {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let unit = nalgebra::UnitQuaternion::from_quaternion(quat);
        Rotation { matrix: *unit.to_rotation_matrix().matrix() }
    }

    /// Nearest orthogonal matrix (polar projection via SVD), determinant
    /// forced to +1.
    pub fn orthonormalized(&self) -> Self {
        let svd = self.matrix.svd(true, true);
        let u = svd.u.expect("svd of 3x3 requested u");
        let vt = svd.v_t.expect("svd of 3x3 requested v_t");
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            // Flip the column associated with the smallest singular value.
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Rotation { matrix: r }
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation { matrix: self.matrix * rhs.matrix }
    }
}

/// An element of SE(3): rotation plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose { rotation: Rotation::identity(), translation }
    }

    /// Homogeneous 4x4 embedding; the last row is exactly (0, 0, 0, 1).
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        let t = -(rt.rotate(&self.translation));
        Pose { rotation: rt, translation: t }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }
}

/// A twist `vec(omega, v)`: angular block first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist { omega: Vector3::zeros(), v: Vector3::zeros() }
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.omega[0], self.omega[1], self.omega[2], self.v[0], self.v[1], self.v[2])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist { omega: self.omega * s, v: self.v * s }
    }
}

/// A 6x6 covariance over twist coordinates.
///
/// Guaranteed symmetric (to 1e-12) and positive semidefinite (smallest
/// eigenvalue >= -1e-10) by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentCovariance {
    matrix: Matrix6<f64>,
}

impl TangentCovariance {
    pub fn zero() -> Self {
        TangentCovariance { matrix: Matrix6::zeros() }
    }

    /// Validates and wraps a covariance matrix.
    pub fn new(matrix: Matrix6<f64>) -> Result<Self, ManifoldError> {
        let asymmetry = (matrix - matrix.transpose()).norm();
        let sym = (matrix + matrix.transpose()) * 0.5;
        let min_eigenvalue = sym
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if asymmetry > 1e-12 || min_eigenvalue < -1e-10 {
            return Err(ManifoldError::InvalidCovariance { asymmetry, min_eigenvalue });
        }
        Ok(TangentCovariance { matrix: sym })
    }

    /// Symmetrizes the input and wraps it without a PSD check. Intended for
    /// covariances produced by recursions whose PSD-ness is structural.
    pub fn from_symmetric_part(matrix: Matrix6<f64>) -> Self {
        TangentCovariance { matrix: (matrix + matrix.transpose()) * 0.5 }
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }
}

/// 3x3 skew-symmetric (hat) matrix of a 3-vector.
pub fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w[2], w[1],
        w[2], 0.0, -w[0],
        -w[1], w[0], 0.0,
    )
}

/// Inverse of [`so3_hat`]; reads the strictly lower triangle.
pub fn so3_vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// SO(3) exponential (Rodrigues formula with a Taylor branch below
/// [`SMALL_ANGLE`]).
pub fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let hat = so3_hat(w);
    let (a, b) = sin_cos_coeffs(theta2);
    Rotation { matrix: Matrix3::identity() + hat * a + hat * hat * b }
}

/// SO(3) logarithm. Fails within [`ANGLE_NEAR_PI_MARGIN`] of pi.
pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>, ManifoldError> {
    let angle = r.angle();
    if angle > std::f64::consts::PI - ANGLE_NEAR_PI_MARGIN {
        return Err(ManifoldError::AngleNearPi { angle });
    }
    // theta / (2 sin theta), Taylor-expanded for small theta.
    let factor = if angle < SMALL_ANGLE {
        0.5 + angle * angle / 12.0
    } else {
        angle / (2.0 * angle.sin())
    };
    let m = r.matrix();
    Ok(so3_vee(&(m - m.transpose())) * factor)
}

/// Right Jacobian of SO(3): relates additive perturbations of the rotation
/// vector to multiplicative perturbations of the rotation,
/// `Exp(w + dw) ~ Exp(w) Exp(Jr(w) dw)`.
pub fn so3_right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let hat = so3_hat(w);
    let hat2 = hat * hat;
    let (b, c) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - hat * b + hat2 * c
}

/// The 4x4 Lie-algebra embedding of a twist: skew block plus translation
/// column, zero last row.
pub fn wedge(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3_hat(&xi.omega));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.v);
    m
}

/// Inverse of [`wedge`].
pub fn vee(m: &Matrix4<f64>) -> Twist {
    Twist {
        omega: Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]),
        v: Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
    }
}

// sin/cos coefficient pairs shared by exp-like formulas:
//   a = sin(theta)/theta, b = (1 - cos(theta))/theta^2.
fn sin_cos_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta2)
    }
}

/// SE(3) exponential map: Rodrigues rotation plus the V-matrix translation.
pub fn se3_exp(xi: &Twist) -> Pose {
    let theta2 = xi.omega.norm_squared();
    let hat = so3_hat(&xi.omega);
    let hat2 = hat * hat;
    let (a, b) = sin_cos_coeffs(theta2);
    // c = (theta - sin theta)/theta^3.
    let c = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 6.0 - theta2 / 120.0
    } else {
        let theta = theta2.sqrt();
        (theta - theta.sin()) / (theta2 * theta)
    };
    let rotation = Rotation { matrix: Matrix3::identity() + hat * a + hat2 * b };
    let v_matrix = Matrix3::identity() + hat * b + hat2 * c;
    Pose { rotation, translation: v_matrix * xi.v }
}

/// SE(3) logarithm map, the inverse of [`se3_exp`].
pub fn se3_log(h: &Pose) -> Result<Twist, ManifoldError> {
    let omega = so3_log(&h.rotation)?;
    let theta2 = omega.norm_squared();
    let hat = so3_hat(&omega);
    let hat2 = hat * hat;
    // V^{-1} = I - hat/2 + coef * hat^2 with
    // coef = (1 - A/(2B))/theta^2, A = sin/theta, B = (1-cos)/theta^2.
    let coef = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        (1.0 - a / (2.0 * b)) / theta2
    };
    let v_inv = Matrix3::identity() - hat * 0.5 + hat2 * coef;
    Ok(Twist { omega, v: v_inv * h.translation })
}

/// Matrix representation of the SE(3) adjoint: `[[R, 0], [p^ R, R]]` in
/// angular-first twist coordinates.
pub fn adjoint(h: &Pose) -> Matrix6<f64> {
    let r = h.rotation.matrix();
    let pr = so3_hat(&h.translation) * r;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&pr);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad
}

/// Retraction used by the optimizer and every residual definition:
/// right multiplication by the exponential, `H * Exp(dx)`.
pub fn retract(h: &Pose, dx: &Twist) -> Pose {
    *h * se3_exp(dx)
}

/// A long-lived product of poses that re-projects its rotation to the
/// nearest orthogonal matrix every 1000 multiplications, bounding float
/// drift in long preintegration chains.
#[derive(Debug, Clone)]
pub struct PoseAccumulator {
    pose: Pose,
    count: u64,
}

/// Number of composed multiplications between re-orthonormalizations.
pub const REPROJECT_EVERY: u64 = 1000;

impl PoseAccumulator {
    pub fn new(initial: Pose) -> Self {
        PoseAccumulator { pose: initial, count: 0 }
    }

    pub fn push(&mut self, rhs: &Pose) {
        self.pose = self.pose * *rhs;
        self.count += 1;
        if self.count % REPROJECT_EVERY == 0 {
            self.pose.rotation = self.pose.rotation.orthonormalized();
        }
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}
