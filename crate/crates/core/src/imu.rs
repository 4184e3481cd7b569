//! On-manifold IMU preintegration between keyframes.
//!
//! Compounds gyroscope and accelerometer samples into relative rotation,
//! velocity and position deltas with a first-order 9x9 covariance
//! (delta ordering: rotation, velocity, position). Biases are held at their
//! linearization values; callers rebuild the deltas when the linearization
//! point moves. The running rotation log also serves the point-contact
//! preintegration, which consumes `DeltaR_{ik}` at contact event times.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::manifold::{
    so3_exp, so3_hat, so3_log, so3_right_jacobian, ManifoldError, Pose, Rotation, REPROJECT_EVERY,
};

/// World-frame gravity (m/s^2).
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Errors raised by IMU preintegration.
#[derive(Debug, Error)]
pub enum ImuError {
    #[error("nonpositive integration step dt = {0}")]
    NonpositiveDt(f64),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// A single IMU measurement: body angular rate and specific force.
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub t: f64,
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Gyroscope and accelerometer biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        ImuBias { gyro: Vector3::zeros(), accel: Vector3::zeros() }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.gyro[0], self.gyro[1], self.gyro[2],
            self.accel[0], self.accel[1], self.accel[2],
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        ImuBias {
            gyro: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

/// IMU noise parameters as continuous-time densities.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    /// Gyro white noise (rad/s/sqrt(Hz)).
    pub sigma_gyro: f64,
    /// Accelerometer white noise (m/s^2/sqrt(Hz)).
    pub sigma_accel: f64,
    /// Gyro bias random walk (rad/s^2/sqrt(Hz)).
    pub sigma_gyro_walk: f64,
    /// Accelerometer bias random walk (m/s^3/sqrt(Hz)).
    pub sigma_accel_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        // Typical MEMS scale.
        ImuNoise {
            sigma_gyro: 1e-3,
            sigma_accel: 1e-2,
            sigma_gyro_walk: 1e-5,
            sigma_accel_walk: 1e-5,
        }
    }
}

/// Preintegrated IMU deltas over one keyframe interval.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    delta_r: Rotation,
    delta_v: Vector3<f64>,
    delta_p: Vector3<f64>,
    sigma: SMatrix<f64, 9, 9>,
    dt_total: f64,
    bias_lin: ImuBias,
    /// `(t, DeltaR_{i,t})` at every sample boundary, for point-contact use.
    rotations: Vec<(f64, Rotation)>,
    steps: u64,
}

impl PreintegratedImu {
    /// Fresh instance anchored at keyframe time `t_start`.
    pub fn new(t_start: f64, bias_lin: ImuBias) -> Self {
        PreintegratedImu {
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            sigma: SMatrix::zeros(),
            dt_total: 0.0,
            bias_lin,
            rotations: vec![(t_start, Rotation::identity())],
            steps: 0,
        }
    }

    /// Integrates one sample over `dt`, propagating deltas and covariance.
    ///
    /// Deltas follow the discrete model with old-value semantics:
    /// `dp += dv dt + 0.5 dR a dt^2`, `dv += dR a dt`, `dR <- dR Exp(w dt)`.
    pub fn step(&mut self, sample: &ImuSample, dt: f64, noise: &ImuNoise) -> Result<(), ImuError> {
        if dt <= 0.0 {
            return Err(ImuError::NonpositiveDt(dt));
        }
        let w = sample.omega - self.bias_lin.gyro;
        let a = sample.accel - self.bias_lin.accel;
        let r = *self.delta_r.matrix();
        let rot_inc = so3_exp(&(w * dt));

        // First-order transition of (dphi, dv, dp).
        let mut a_mat = SMatrix::<f64, 9, 9>::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_inc.matrix().transpose());
        let ra_hat = r * so3_hat(&a);
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra_hat * dt));
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra_hat * (0.5 * dt * dt)));
        a_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));

        // Discrete noise covariance: continuous density / dt.
        let jr = so3_right_jacobian(&(w * dt));
        let qg = noise.sigma_gyro * noise.sigma_gyro / dt;
        let qa = noise.sigma_accel * noise.sigma_accel / dt;
        let bg = jr * dt;
        let bv = r * dt;
        let bp = r * (0.5 * dt * dt);
        let mut bqb = SMatrix::<f64, 9, 9>::zeros();
        bqb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(bg * bg.transpose() * qg));
        bqb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(bv * bv.transpose() * qa));
        bqb.fixed_view_mut::<3, 3>(6, 6).copy_from(&(bp * bp.transpose() * qa));
        bqb.fixed_view_mut::<3, 3>(3, 6).copy_from(&(bv * bp.transpose() * qa));
        bqb.fixed_view_mut::<3, 3>(6, 3).copy_from(&(bp * bv.transpose() * qa));
        self.sigma = a_mat * self.sigma * a_mat.transpose() + bqb;
        self.sigma = (self.sigma + self.sigma.transpose()) * 0.5;

        self.delta_p += self.delta_v * dt + r * a * (0.5 * dt * dt);
        self.delta_v += r * a * dt;
        self.delta_r = self.delta_r * rot_inc;
        self.steps += 1;
        if self.steps % REPROJECT_EVERY == 0 {
            self.delta_r = self.delta_r.orthonormalized();
        }
        self.dt_total += dt;
        self.rotations.push((sample.t + dt, self.delta_r));
        Ok(())
    }

    pub fn delta_rotation(&self) -> &Rotation {
        &self.delta_r
    }

    pub fn delta_velocity(&self) -> &Vector3<f64> {
        &self.delta_v
    }

    pub fn delta_position(&self) -> &Vector3<f64> {
        &self.delta_p
    }

    pub fn covariance(&self) -> &SMatrix<f64, 9, 9> {
        &self.sigma
    }

    pub fn dt_total(&self) -> f64 {
        self.dt_total
    }

    pub fn bias_lin(&self) -> &ImuBias {
        &self.bias_lin
    }

    /// `DeltaR_{i,t}` at a sample boundary within `tol` of `t`, if any.
    pub fn rotation_at(&self, t: f64, tol: f64) -> Option<Rotation> {
        let idx = self
            .rotations
            .partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(f64, Rotation)> = None;
        for i in [idx.wrapping_sub(1), idx] {
            if let Some((ts, r)) = self.rotations.get(i) {
                let d = (ts - t).abs();
                if d <= tol && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, *r));
                }
            }
        }
        best.map(|(_, r)| r)
    }
}

/// Preintegrates a sorted sample slice covering `[samples[0].t, t_end)`.
/// Each sample integrates until the next sample's timestamp; the last one
/// until `t_end`.
pub fn preintegrate(
    samples: &[ImuSample],
    t_end: f64,
    bias: &ImuBias,
    noise: &ImuNoise,
) -> Result<PreintegratedImu, ImuError> {
    let t_start = samples.first().map_or(t_end, |s| s.t);
    let mut p = PreintegratedImu::new(t_start, *bias);
    for (k, s) in samples.iter().enumerate() {
        let next_t = samples.get(k + 1).map_or(t_end, |n| n.t);
        p.step(s, next_t - s.t, noise)?;
    }
    Ok(p)
}

/// Delta-only fast path of [`preintegrate`], used when re-evaluating the IMU
/// residual at a perturbed bias: returns `(DeltaR, Dv, Dp, dt_total)`.
pub fn integrate_deltas(
    samples: &[ImuSample],
    t_end: f64,
    bias: &ImuBias,
) -> Result<(Rotation, Vector3<f64>, Vector3<f64>, f64), ImuError> {
    let mut delta_r = Rotation::identity();
    let mut delta_v = Vector3::zeros();
    let mut delta_p = Vector3::zeros();
    let mut dt_total = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let next_t = samples.get(k + 1).map_or(t_end, |n| n.t);
        let dt = next_t - s.t;
        if dt <= 0.0 {
            return Err(ImuError::NonpositiveDt(dt));
        }
        let w = s.omega - bias.gyro;
        let a = s.accel - bias.accel;
        let ra = delta_r.rotate(&a);
        delta_p += delta_v * dt + ra * (0.5 * dt * dt);
        delta_v += ra * dt;
        delta_r = delta_r * so3_exp(&(w * dt));
        if (k + 1) as u64 % REPROJECT_EVERY == 0 {
            delta_r = delta_r.orthonormalized();
        }
        dt_total += dt;
    }
    Ok((delta_r, delta_v, delta_p, dt_total))
}

/// The 9-vector IMU factor residual (rotation log, velocity, position),
/// comparing state deltas against the given preintegrated deltas.
pub fn imu_factor_residual(
    x_i: &Pose,
    v_i: &Vector3<f64>,
    x_j: &Pose,
    v_j: &Vector3<f64>,
    delta_r: &Rotation,
    delta_v: &Vector3<f64>,
    delta_p: &Vector3<f64>,
    dt: f64,
    gravity: &Vector3<f64>,
) -> Result<SMatrix<f64, 9, 1>, ImuError> {
    let ri_t = x_i.rotation.inverse();
    let r_res = so3_log(&(delta_r.inverse() * (ri_t * x_j.rotation)))?;
    let v_res = ri_t.rotate(&(v_j - v_i - gravity * dt)) - delta_v;
    let p_res = ri_t.rotate(
        &(x_j.translation - x_i.translation - v_i * dt - gravity * (0.5 * dt * dt)),
    ) - delta_p;
    let mut r = SMatrix::<f64, 9, 1>::zeros();
    r.fixed_view_mut::<3, 1>(0, 0).copy_from(&r_res);
    r.fixed_view_mut::<3, 1>(3, 0).copy_from(&v_res);
    r.fixed_view_mut::<3, 1>(6, 0).copy_from(&p_res);
    Ok(r)
}

/// Residual of the bias random-walk factor between consecutive keyframes:
/// simply `b_j - b_i`. The associated covariance is the configured walk
/// density times the inter-keyframe time.
pub fn bias_random_walk_residual(b_i: &ImuBias, b_j: &ImuBias) -> Vector6<f64> {
    b_j.to_vector() - b_i.to_vector()
}
