//! Hybrid preintegration of contact measurements.
//!
//! While a foot is in stance the contact frame is assumed fixed in the world
//! up to slip noise; when contact transfers between feet the relative
//! measurement jumps through the kinematic transform `H_C-C+`. This module
//! integrates those two regimes into a single relative contact measurement
//! `DeltaC_{ij}` with covariance, valid across an arbitrary number of
//! contact switches between keyframes, plus the point-contact variant that
//! preintegrates contact position only.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::imu::PreintegratedImu;
use crate::kinematics::{ContactFrame, EncoderReading, KinematicsError, RobotModel};
use crate::manifold::{
    adjoint, se3_exp, se3_log, ManifoldError, Pose, Rotation, TangentCovariance, Twist,
    REPROJECT_EVERY,
};

/// Diagonal regularization applied when a preintegrated contact covariance
/// is used to weight a factor.
pub const CONTACT_COVARIANCE_REGULARIZATION: f64 = 1e-9;

/// Tolerance when aligning contact event times with IMU sample boundaries.
pub const IMU_ALIGNMENT_TOL: f64 = 1e-9;

/// Errors raised by contact preintegration.
#[derive(Debug, Error)]
pub enum ContactError {
    #[error("nonpositive stance step dt = {0}")]
    NonpositiveDt(f64),
    #[error("switch event must transfer between distinct frames")]
    InvalidSwitch,
    #[error("no preintegrated IMU rotation available at t = {t}")]
    MissingImuAlignment { t: f64 },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// Covariance of the continuous-time slip twist noise (angular block first).
#[derive(Debug, Clone)]
pub struct ContactNoiseModel {
    pub sigma_xi: Matrix6<f64>,
}

impl ContactNoiseModel {
    /// Isotropic slip noise with separate angular and linear densities.
    pub fn isotropic(sigma_omega: f64, sigma_v: f64) -> Self {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i)] = sigma_omega * sigma_omega;
            m[(i + 3, i + 3)] = sigma_v * sigma_v;
        }
        ContactNoiseModel { sigma_xi: m }
    }

    pub fn zero() -> Self {
        ContactNoiseModel { sigma_xi: Matrix6::zeros() }
    }
}

impl Default for ContactNoiseModel {
    fn default() -> Self {
        // Plausible slip scale for a walking biped; configurable everywhere.
        ContactNoiseModel::isotropic(0.01, 0.01)
    }
}

/// A contact switch: the tracked frame transfers `from -> to` using the
/// encoder reading at the switch instant.
#[derive(Debug, Clone)]
pub struct SwitchEvent {
    pub t: f64,
    pub from: ContactFrame,
    pub to: ContactFrame,
    pub reading: EncoderReading,
}

impl SwitchEvent {
    pub fn new(
        t: f64,
        from: ContactFrame,
        to: ContactFrame,
        reading: EncoderReading,
    ) -> Result<Self, ContactError> {
        if from == to {
            return Err(ContactError::InvalidSwitch);
        }
        Ok(SwitchEvent { t, from, to, reading })
    }
}

/// Running hybrid preintegrated contact measurement `DeltaC_{ik}` with its
/// covariance, over one keyframe interval.
#[derive(Debug, Clone)]
pub struct PreintegratedContact {
    delta_c: Pose,
    sigma: Matrix6<f64>,
    elapsed: f64,
    switches: Vec<SwitchEvent>,
    start_key: usize,
    mults: u64,
}

impl PreintegratedContact {
    /// Fresh instance: identity measurement, zero covariance.
    pub fn new(start_key: usize) -> Self {
        PreintegratedContact {
            delta_c: Pose::identity(),
            sigma: Matrix6::zeros(),
            elapsed: 0.0,
            switches: Vec::new(),
            start_key,
            mults: 0,
        }
    }

    /// Stance flow over `dt`: the measurement is unchanged, the covariance
    /// grows by the slip density times `dt`.
    pub fn stance_step(&mut self, dt: f64, noise: &ContactNoiseModel) -> Result<(), ContactError> {
        if dt <= 0.0 {
            return Err(ContactError::NonpositiveDt(dt));
        }
        self.sigma += noise.sigma_xi * dt;
        self.elapsed += dt;
        Ok(())
    }

    /// Switch reset: the measurement composes with `H_C-C+(alpha~)`, the
    /// accumulated covariance is conjugated into the new contact frame by
    /// `Ad(H^{-1})`, and the encoder noise enters through the transfer
    /// Jacobian.
    pub fn switch(&mut self, robot: &RobotModel, event: SwitchEvent) -> Result<(), ContactError> {
        let h = robot.fk_contact_to_contact(event.from, event.to, &event.reading.alpha)?;
        let jac = robot.body_jacobian_contact_to_contact(event.from, event.to, &event.reading.alpha)?;
        let ad_inv = adjoint(&h.inverse());
        let enc = &jac * &event.reading.sigma_alpha * jac.transpose();
        let mut enc6 = Matrix6::zeros();
        for r in 0..6 {
            for c in 0..6 {
                enc6[(r, c)] = enc[(r, c)];
            }
        }
        self.sigma = ad_inv * self.sigma * ad_inv.transpose() + enc6;
        self.sigma = (self.sigma + self.sigma.transpose()) * 0.5;
        self.delta_c = self.delta_c * h;
        self.mults += 1;
        if self.mults % REPROJECT_EVERY == 0 {
            self.delta_c.rotation = self.delta_c.rotation.orthonormalized();
        }
        self.switches.push(event);
        Ok(())
    }

    /// Residual of the hybrid contact factor between the contact poses at
    /// the interval endpoints: `Log(C_j^{-1} C_i DeltaC_{ij})`.
    pub fn residual(&self, c_i: &Pose, c_j: &Pose) -> Result<Twist, ContactError> {
        Ok(se3_log(&(c_j.inverse() * *c_i * self.delta_c))?)
    }

    /// Combines this interval (i -> k) with a following one (k -> j), valid
    /// when the split point is not itself a switch instant.
    pub fn compose(&self, rest: &PreintegratedContact) -> PreintegratedContact {
        let ad = adjoint(&rest.delta_c.inverse());
        let mut switches = self.switches.clone();
        switches.extend(rest.switches.iter().cloned());
        PreintegratedContact {
            delta_c: self.delta_c * rest.delta_c,
            sigma: ad * self.sigma * ad.transpose() + rest.sigma,
            elapsed: self.elapsed + rest.elapsed,
            switches,
            start_key: self.start_key,
            mults: self.mults + rest.mults + 1,
        }
    }

    pub fn delta_c(&self) -> &Pose {
        &self.delta_c
    }

    pub fn sigma(&self) -> &Matrix6<f64> {
        &self.sigma
    }

    pub fn covariance(&self) -> TangentCovariance {
        TangentCovariance::from_symmetric_part(self.sigma)
    }

    /// Covariance plus the factor regularization, ready for weighting.
    pub fn regularized_sigma(&self) -> Matrix6<f64> {
        self.sigma + Matrix6::identity() * CONTACT_COVARIANCE_REGULARIZATION
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn switches(&self) -> &[SwitchEvent] {
        &self.switches
    }

    pub fn start_key(&self) -> usize {
        self.start_key
    }
}

/// One event of a contact interval. Stance events carry the tracked frame
/// and encoder values at the sample so that the point-contact variant can
/// evaluate `FK_R`; the rigid SE(3) preintegration ignores them.
#[derive(Debug, Clone)]
pub enum ContactEvent {
    Stance { t: f64, dt: f64, frame: ContactFrame, alpha: DVector<f64> },
    Switch(SwitchEvent),
}

/// An explicit event schedule for one keyframe interval, used to drive the
/// preintegration and its brute-force oracles.
#[derive(Debug, Clone)]
pub struct ContactSchedule {
    pub start_key: usize,
    pub events: Vec<ContactEvent>,
}

impl ContactSchedule {
    /// Runs the iterative propagation over the schedule.
    pub fn preintegrate(
        &self,
        robot: &RobotModel,
        noise: &ContactNoiseModel,
    ) -> Result<PreintegratedContact, ContactError> {
        let mut p = PreintegratedContact::new(self.start_key);
        for ev in &self.events {
            match ev {
                ContactEvent::Stance { dt, .. } => p.stance_step(*dt, noise)?,
                ContactEvent::Switch(sw) => p.switch(robot, sw.clone())?,
            }
        }
        Ok(p)
    }

    /// The noise-free measurement computed the direct way, as the ordered
    /// product of the switch transfers. Bit-identical to the iterative
    /// propagation.
    pub fn direct_product(&self, robot: &RobotModel) -> Result<Pose, ContactError> {
        let mut prod = Pose::identity();
        let mut mults = 0u64;
        for ev in &self.events {
            if let ContactEvent::Switch(sw) = ev {
                prod = prod * robot.fk_contact_to_contact(sw.from, sw.to, &sw.reading.alpha)?;
                mults += 1;
                if mults % REPROJECT_EVERY == 0 {
                    prod.rotation = prod.rotation.orthonormalized();
                }
            }
        }
        Ok(prod)
    }

    /// Monte-Carlo oracle for the preintegrated covariance: integrates the
    /// noisy discrete hybrid model directly as a product of exponentials and
    /// kinematic transfers, and returns the sample covariance of
    /// `Log(DeltaC~^{-1} DeltaC_sample)`.
    ///
    /// This is intentionally independent of the iterative covariance
    /// recursion it validates.
    pub fn monte_carlo_covariance(
        &self,
        robot: &RobotModel,
        noise: &ContactNoiseModel,
        n_samples: usize,
        seed: u64,
    ) -> Result<Matrix6<f64>, ContactError> {
        let nominal_inv = self.direct_product(robot)?.inverse();
        // Pre-factor the per-event samplers.
        let slip_sqrt = psd_sqrt6(&noise.sigma_xi);
        let enc_sqrts: Vec<DMatrix<f64>> = self
            .events
            .iter()
            .filter_map(|ev| match ev {
                ContactEvent::Switch(sw) => Some(psd_sqrt_dyn(&sw.reading.sigma_alpha)),
                _ => None,
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logs: Vec<Vector6<f64>> = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut acc = Pose::identity();
            let mut switch_idx = 0usize;
            for ev in &self.events {
                match ev {
                    ContactEvent::Stance { dt, .. } => {
                        // Discrete slip noise has covariance sigma_xi / dt.
                        let n = &slip_sqrt * standard_normal6(&mut rng) / dt.sqrt();
                        acc = acc * se3_exp(&Twist::from_vector(&(-n * *dt)));
                    }
                    ContactEvent::Switch(sw) => {
                        let z = standard_normal_dyn(&mut rng, sw.reading.alpha.len());
                        let n_alpha = &enc_sqrts[switch_idx] * z;
                        switch_idx += 1;
                        let noisy = &sw.reading.alpha - n_alpha;
                        acc = acc * robot.fk_contact_to_contact(sw.from, sw.to, &noisy)?;
                    }
                }
            }
            logs.push(se3_log(&(nominal_inv * acc))?.to_vector());
        }
        Ok(sample_covariance6(&logs))
    }
}

/// Running point-contact preintegration: position-only, for robots whose
/// contact orientation is unconstrained. Consumes the rotation log of an
/// aligned IMU preintegration.
#[derive(Debug, Clone)]
pub struct PointContactPreintegrated {
    delta_d: Vector3<f64>,
    sigma_d: Matrix3<f64>,
    switches: Vec<SwitchEvent>,
}

impl Default for PointContactPreintegrated {
    fn default() -> Self {
        Self::new()
    }
}

impl PointContactPreintegrated {
    pub fn new() -> Self {
        PointContactPreintegrated {
            delta_d: Vector3::zeros(),
            sigma_d: Matrix3::zeros(),
            switches: Vec::new(),
        }
    }

    /// Stance flow: the position measurement is unchanged; linear slip noise
    /// accumulates rotated into the keyframe-i body frame.
    pub fn stance_step(
        &mut self,
        imu: &PreintegratedImu,
        robot: &RobotModel,
        t: f64,
        dt: f64,
        frame: ContactFrame,
        alpha: &DVector<f64>,
        sigma_v: &Matrix3<f64>,
    ) -> Result<(), ContactError> {
        if dt <= 0.0 {
            return Err(ContactError::NonpositiveDt(dt));
        }
        let delta_r = imu
            .rotation_at(t, IMU_ALIGNMENT_TOL)
            .ok_or(ContactError::MissingImuAlignment { t })?;
        let fk_r = robot.fk_base_to_contact(frame, alpha)?.rotation;
        let m = delta_r.matrix() * fk_r.matrix();
        self.sigma_d += m * sigma_v * m.transpose() * dt;
        Ok(())
    }

    /// Switch reset: adds the rotated kinematic offset
    /// `DeltaR_{i,s} FK_R(alpha~) FK_p(alpha~)` to the measurement and the
    /// Jacobian-mapped encoder noise to the covariance.
    pub fn switch(
        &mut self,
        imu: &PreintegratedImu,
        robot: &RobotModel,
        event: SwitchEvent,
    ) -> Result<(), ContactError> {
        let delta_r = imu
            .rotation_at(event.t, IMU_ALIGNMENT_TOL)
            .ok_or(ContactError::MissingImuAlignment { t: event.t })?;
        let g = point_switch_offset(robot, event.from, event.to, &event.reading.alpha)?;
        self.delta_d += delta_r.rotate(&g);
        let jac = point_switch_jacobian(robot, event.from, event.to, &event.reading.alpha)?;
        let mapped = &jac * &event.reading.sigma_alpha * jac.transpose();
        let mut enc = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                enc[(r, c)] = mapped[(r, c)];
            }
        }
        let rm = delta_r.matrix();
        self.sigma_d += rm * enc * rm.transpose();
        self.sigma_d = (self.sigma_d + self.sigma_d.transpose()) * 0.5;
        self.switches.push(event);
        Ok(())
    }

    /// Residual `R_i^T (d_j - d_i) - Dd~_{ij}`.
    pub fn residual(&self, r_i: &Rotation, d_i: &Vector3<f64>, d_j: &Vector3<f64>) -> Vector3<f64> {
        r_i.inverse().rotate(&(d_j - d_i)) - self.delta_d
    }

    pub fn delta_d(&self) -> &Vector3<f64> {
        &self.delta_d
    }

    pub fn sigma_d(&self) -> &Matrix3<f64> {
        &self.sigma_d
    }

    pub fn switches(&self) -> &[SwitchEvent] {
        &self.switches
    }
}

/// The world-frame-free switch offset of the point-contact model:
/// `g(alpha) = FK_R(alpha) FK_p(alpha)` with `FK_R` the base-to-old-contact
/// rotation and `FK_p` the translation of the contact transfer.
fn point_switch_offset(
    robot: &RobotModel,
    from: ContactFrame,
    to: ContactFrame,
    alpha: &DVector<f64>,
) -> Result<Vector3<f64>, ContactError> {
    let fk_r = robot.fk_base_to_contact(from, alpha)?.rotation;
    let fk_p = robot.fk_contact_to_contact(from, to, alpha)?.translation;
    Ok(fk_r.rotate(&fk_p))
}

fn point_switch_jacobian(
    robot: &RobotModel,
    from: ContactFrame,
    to: ContactFrame,
    alpha: &DVector<f64>,
) -> Result<DMatrix<f64>, ContactError> {
    let h = crate::kinematics::JACOBIAN_STEP;
    let n = alpha.len();
    let mut jac = DMatrix::zeros(3, n);
    let mut work = alpha.clone();
    for i in 0..n {
        work[i] = alpha[i] + h;
        let plus = point_switch_offset(robot, from, to, &work)?;
        work[i] = alpha[i] - h;
        let minus = point_switch_offset(robot, from, to, &work)?;
        work[i] = alpha[i];
        jac.column_mut(i).copy_from(&((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Point-contact preintegration over a whole schedule.
pub fn point_preintegrate(
    schedule: &ContactSchedule,
    robot: &RobotModel,
    imu: &PreintegratedImu,
    sigma_v: &Matrix3<f64>,
) -> Result<PointContactPreintegrated, ContactError> {
    let mut p = PointContactPreintegrated::new();
    for ev in &schedule.events {
        match ev {
            ContactEvent::Stance { t, dt, frame, alpha } => {
                p.stance_step(imu, robot, *t, *dt, *frame, alpha, sigma_v)?
            }
            ContactEvent::Switch(sw) => p.switch(imu, robot, sw.clone())?,
        }
    }
    Ok(p)
}

/// Direct-sum oracle for the noise-free point-contact measurement:
/// `sum_n DeltaR_{i,s_n} FK_R(alpha~_{s_n}) FK_p(alpha~_{s_n})`.
pub fn point_direct_sum(
    schedule: &ContactSchedule,
    robot: &RobotModel,
    imu: &PreintegratedImu,
) -> Result<Vector3<f64>, ContactError> {
    let mut sum = Vector3::zeros();
    for ev in &schedule.events {
        if let ContactEvent::Switch(sw) = ev {
            let delta_r = imu
                .rotation_at(sw.t, IMU_ALIGNMENT_TOL)
                .ok_or(ContactError::MissingImuAlignment { t: sw.t })?;
            sum += delta_r.rotate(&point_switch_offset(robot, sw.from, sw.to, &sw.reading.alpha)?);
        }
    }
    Ok(sum)
}

/// Monte-Carlo oracle for the point-contact covariance, sampling encoder
/// noise at switches and linear slip noise during stance, with the IMU
/// rotations held at their preintegrated values.
pub fn point_monte_carlo_covariance(
    schedule: &ContactSchedule,
    robot: &RobotModel,
    imu: &PreintegratedImu,
    sigma_v: &Matrix3<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<Matrix3<f64>, ContactError> {
    let nominal = point_direct_sum(schedule, robot, imu)?;
    let slip_sqrt = psd_sqrt3(sigma_v);
    let enc_sqrts: Vec<DMatrix<f64>> = schedule
        .events
        .iter()
        .filter_map(|ev| match ev {
            ContactEvent::Switch(sw) => Some(psd_sqrt_dyn(&sw.reading.sigma_alpha)),
            _ => None,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errs: Vec<Vector3<f64>> = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut d = Vector3::zeros();
        let mut switch_idx = 0usize;
        for ev in &schedule.events {
            match ev {
                ContactEvent::Stance { t, dt, frame, alpha } => {
                    let delta_r = imu
                        .rotation_at(*t, IMU_ALIGNMENT_TOL)
                        .ok_or(ContactError::MissingImuAlignment { t: *t })?;
                    let fk_r = robot.fk_base_to_contact(*frame, alpha)?.rotation;
                    let n_v = &slip_sqrt * standard_normal3(&mut rng) / dt.sqrt();
                    d -= (delta_r * fk_r).rotate(&(n_v * *dt));
                }
                ContactEvent::Switch(sw) => {
                    let z = standard_normal_dyn(&mut rng, sw.reading.alpha.len());
                    let n_alpha = &enc_sqrts[switch_idx] * z;
                    switch_idx += 1;
                    let noisy = &sw.reading.alpha - n_alpha;
                    let delta_r = imu
                        .rotation_at(sw.t, IMU_ALIGNMENT_TOL)
                        .ok_or(ContactError::MissingImuAlignment { t: sw.t })?;
                    d += delta_r.rotate(&point_switch_offset(robot, sw.from, sw.to, &noisy)?);
                }
            }
        }
        errs.push(d - nominal);
    }
    Ok(sample_covariance3(&errs))
}

fn psd_sqrt6(m: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = m.symmetric_eigen();
    let mut s = Matrix6::zeros();
    for i in 0..6 {
        s[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    eig.eigenvectors * s * eig.eigenvectors.transpose()
}

fn psd_sqrt3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let mut s = Matrix3::zeros();
    for i in 0..3 {
        s[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    eig.eigenvectors * s * eig.eigenvectors.transpose()
}

fn psd_sqrt_dyn(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * s * eig.eigenvectors.transpose()
}

fn standard_normal6(rng: &mut impl Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.sample(StandardNormal))
}

fn standard_normal3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample(StandardNormal))
}

fn standard_normal_dyn(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn sample_covariance6(samples: &[Vector6<f64>]) -> Matrix6<f64> {
    let n = samples.len().max(2) as f64;
    let mean: Vector6<f64> = samples.iter().sum::<Vector6<f64>>() / n;
    let mut cov = Matrix6::zeros();
    for s in samples {
        let d = s - mean;
        cov += d * d.transpose();
    }
    cov / (n - 1.0)
}

fn sample_covariance3(samples: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = samples.len().max(2) as f64;
    let mean: Vector3<f64> = samples.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for s in samples {
        let d = s - mean;
        cov += d * d.transpose();
    }
    cov / (n - 1.0)
}
