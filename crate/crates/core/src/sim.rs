//! Deterministic bipedal-walk scenario generator.
//!
//! Ground truth is constructed joint-space-first so that the emitted sensor
//! streams are exactly consistent with the measurement models they feed:
//!
//! * a smooth template base trajectory is tracked by damped-least-squares IK
//!   of the stance leg, and the true base pose is then *defined* through the
//!   pinned contact pose, `X = C * FK(alpha)^-1`; forward kinematics of the
//!   emitted encoder values reproduces the true base-to-contact transform to
//!   machine precision and the true contact pose stays constant over each
//!   stance;
//! * contact switches transfer the pinned pose through the swing leg's
//!   landing configuration, so the switch product telescopes exactly;
//! * gyro samples are logs of consecutive true rotations, and accelerometer
//!   samples carry a small per-keyframe-interval correction that makes the
//!   discrete preintegration of the stream land exactly on the true keyframe
//!   states.
//!
//! Identical `(config, seed)` inputs produce bit-identical datasets.

use nalgebra::{DVector, Matrix6, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::imu::GRAVITY;
use crate::io::DatasetRecord;
use crate::kinematics::{ContactFrame, KinematicChain, KinematicsError, RobotModel};
use crate::manifold::{se3_exp, se3_log, so3_log, ManifoldError, Pose, Rotation, Twist};

/// Errors raised by scenario generation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("config key '{key}': {msg}")]
    BadConfig { key: String, msg: String },
    #[error("infeasible scenario: {0}")]
    InfeasibleConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// Scenario parameters. All sensor noise levels are one-sigma; the contact
/// slip densities describe the estimator's noise model for the (slip-free)
/// simulated stance.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub step_period: f64,
    pub step_length: f64,
    pub imu_rate: f64,
    pub encoder_rate: f64,
    pub cam_rate: f64,
    pub keyframe_dt: f64,
    pub sigma_alpha: f64,
    pub sigma_contact_omega: f64,
    pub sigma_contact_v: f64,
    pub sigma_gyro: f64,
    pub sigma_accel: f64,
    pub sigma_relpose_rot: f64,
    pub sigma_relpose_pos: f64,
    pub dropout_windows: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration: 10.0,
            step_period: 0.7,
            step_length: 0.2,
            imu_rate: 400.0,
            encoder_rate: 400.0,
            cam_rate: 20.0,
            keyframe_dt: 0.25,
            sigma_alpha: 0.0,
            sigma_contact_omega: 0.01,
            sigma_contact_v: 0.01,
            sigma_gyro: 0.0,
            sigma_accel: 0.0,
            sigma_relpose_rot: 0.0,
            sigma_relpose_pos: 0.0,
            dropout_windows: Vec::new(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected by name. Dropout windows are `t0:t1` pairs separated by
    /// commas.
    pub fn from_text(text: &str) -> Result<Self, SimError> {
        let mut cfg = ScenarioConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SimError::BadConfig {
                key: format!("line {}", idx + 1),
                msg: "expected 'key = value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let num = |v: &str| -> Result<f64, SimError> {
                v.parse::<f64>().map_err(|_| SimError::BadConfig {
                    key: key.to_string(),
                    msg: format!("bad number '{v}'"),
                })
            };
            match key {
                "duration" => cfg.duration = num(value)?,
                "step_period" => cfg.step_period = num(value)?,
                "step_length" => cfg.step_length = num(value)?,
                "imu_rate" => cfg.imu_rate = num(value)?,
                "encoder_rate" => cfg.encoder_rate = num(value)?,
                "cam_rate" => cfg.cam_rate = num(value)?,
                "keyframe_dt" => cfg.keyframe_dt = num(value)?,
                "sigma_alpha" => cfg.sigma_alpha = num(value)?,
                "sigma_contact_omega" => cfg.sigma_contact_omega = num(value)?,
                "sigma_contact_v" => cfg.sigma_contact_v = num(value)?,
                "sigma_gyro" => cfg.sigma_gyro = num(value)?,
                "sigma_accel" => cfg.sigma_accel = num(value)?,
                "sigma_relpose_rot" => cfg.sigma_relpose_rot = num(value)?,
                "sigma_relpose_pos" => cfg.sigma_relpose_pos = num(value)?,
                "seed" => {
                    cfg.seed = value.parse::<u64>().map_err(|_| SimError::BadConfig {
                        key: key.to_string(),
                        msg: format!("bad integer '{value}'"),
                    })?
                }
                "dropout" => {
                    cfg.dropout_windows.clear();
                    for win in value.split(',').filter(|w| !w.trim().is_empty()) {
                        let (a, b) = win.split_once(':').ok_or_else(|| SimError::BadConfig {
                            key: key.to_string(),
                            msg: format!("expected 't0:t1', got '{win}'"),
                        })?;
                        cfg.dropout_windows.push((num(a.trim())?, num(b.trim())?));
                    }
                }
                other => {
                    return Err(SimError::BadConfig {
                        key: other.to_string(),
                        msg: "unknown key".into(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("duration", self.duration),
            ("step_period", self.step_period),
            ("step_length", self.step_length),
            ("imu_rate", self.imu_rate),
            ("encoder_rate", self.encoder_rate),
            ("cam_rate", self.cam_rate),
            ("keyframe_dt", self.keyframe_dt),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::BadConfig { key: key.into(), msg: format!("must be positive, got {v}") });
            }
        }
        for (name, rate) in [
            ("encoder_rate", self.encoder_rate),
            ("imu_rate", self.imu_rate),
            ("cam_rate", self.cam_rate),
        ] {
            let n = self.keyframe_dt * rate;
            if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
                return Err(SimError::BadConfig {
                    key: "keyframe_dt".into(),
                    msg: format!("must be an integer number of {name} samples (got {n})"),
                });
            }
        }
        if self.step_period < 4.0 / self.encoder_rate {
            return Err(SimError::BadConfig {
                key: "step_period".into(),
                msg: "must span at least 4 encoder samples".into(),
            });
        }
        for (t0, t1) in &self.dropout_windows {
            if !t0.is_finite() || !t1.is_finite() || *t0 >= *t1 || *t0 < 0.0 || *t1 > self.duration {
                return Err(SimError::BadConfig {
                    key: "dropout".into(),
                    msg: format!("window {t0}:{t1} outside [0, {}]", self.duration),
                });
            }
        }
        Ok(())
    }

    pub fn keyframe_count(&self) -> usize {
        (self.duration / self.keyframe_dt + 1e-9).floor() as usize
    }

    pub fn switch_count(&self) -> usize {
        (self.duration / self.step_period + 1e-9).floor() as usize
    }
}

/// A contact switch instant in the truth schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchRecord {
    pub t: f64,
    pub from: ContactFrame,
    pub to: ContactFrame,
}

/// One ground-truth state sample (encoder rate).
#[derive(Debug, Clone)]
pub struct TruthSample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub contact: Pose,
    pub contact_frame: ContactFrame,
}

/// Ground truth: the sampled state trajectory plus the switch schedule.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub samples: Vec<TruthSample>,
    pub switches: Vec<SwitchRecord>,
}

impl GroundTruth {
    pub fn to_records(&self) -> Vec<DatasetRecord> {
        self.samples
            .iter()
            .map(|s| DatasetRecord::Truth {
                t: s.t,
                x_q: s.pose.rotation.to_quaternion_wxyz(),
                x_p: [s.pose.translation[0], s.pose.translation[1], s.pose.translation[2]],
                v: [s.velocity[0], s.velocity[1], s.velocity[2]],
                c_q: s.contact.rotation.to_quaternion_wxyz(),
                c_p: [s.contact.translation[0], s.contact.translation[1], s.contact.translation[2]],
                bg: [0.0; 3],
                ba: [0.0; 3],
            })
            .collect()
    }
}

// Gait geometry for the bundled demo biped.
const BASE_HEIGHT: f64 = 0.72;
const HIP_HALF_WIDTH: f64 = 0.135;
const SWAY_AMPLITUDE: f64 = 0.015;
const BOUNCE_AMPLITUDE: f64 = 0.012;
const LEAN_PITCH: f64 = 0.02;
const LEAN_ROLL: f64 = 0.015;
const SWING_LIFT: f64 = 0.04;
/// IK position misfit above which the scenario is declared unreachable.
const FEASIBILITY_TOL: f64 = 5e-3;

fn foot_of_phase(phase: usize) -> ContactFrame {
    if phase % 2 == 0 { ContactFrame::Left } else { ContactFrame::Right }
}

fn quintic_smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

/// Template base pose: forward progress with lateral sway, vertical bounce
/// and a small periodic lean.
fn template_base(cfg: &ScenarioConfig, t: f64) -> Pose {
    let tp = cfg.step_period;
    let speed = cfg.step_length / tp;
    let p = Vector3::new(
        speed * t,
        SWAY_AMPLITUDE * (std::f64::consts::PI * t / tp).sin(),
        BASE_HEIGHT - BOUNCE_AMPLITUDE * (std::f64::consts::PI * t / tp).sin().powi(2),
    );
    let roll = LEAN_ROLL * (std::f64::consts::PI * t / tp).sin();
    let pitch = LEAN_PITCH * (2.0 * std::f64::consts::PI * t / tp).sin();
    Pose::new(Rotation::from_rpy(roll, pitch, 0.0), p)
}

/// Landing target of the n-th switch (1-based): half a step ahead of where
/// the base will be, on the swinging foot's side of the hips.
fn landing_target(cfg: &ScenarioConfig, n_switch: usize) -> Pose {
    let foot = foot_of_phase(n_switch);
    let y = match foot {
        ContactFrame::Left => HIP_HALF_WIDTH,
        ContactFrame::Right => -HIP_HALF_WIDTH,
    };
    Pose::from_translation(Vector3::new(
        (n_switch as f64 + 0.5) * cfg.step_length,
        y,
        0.0,
    ))
}

/// Damped-least-squares IK on one chain: minimizes the weighted log residual
/// `Log(target^{-1} FK(alpha))`. Returns the solution and the final position
/// misfit.
fn ik_solve(
    chain: &KinematicChain,
    target: &Pose,
    warm: &DVector<f64>,
    w_pos: f64,
) -> Result<(DVector<f64>, f64), SimError> {
    let mut alpha = warm.clone();
    let weights = Vector6::new(1.0, 1.0, 1.0, w_pos, w_pos, w_pos);
    let lambda = 1e-9;
    for _ in 0..100 {
        let fk = chain.fk(&alpha)?;
        // A residual rotation near pi means the target is hopelessly far;
        // report it as a full-scale misfit instead of failing the log.
        let r = match se3_log(&(target.inverse() * fk)) {
            Ok(xi) => xi.to_vector(),
            Err(_) => return Ok((alpha, f64::INFINITY)),
        };
        let jac = chain.body_jacobian(&alpha)?;
        // Normal equations of the weighted Gauss-Newton step.
        let n = chain.dof();
        let mut jtj = nalgebra::DMatrix::zeros(n, n);
        let mut jtr = DVector::zeros(n);
        for c1 in 0..n {
            for c2 in 0..n {
                let mut s = 0.0;
                for row in 0..6 {
                    s += jac[(row, c1)] * weights[row] * jac[(row, c2)];
                }
                jtj[(c1, c2)] = s;
            }
            jtj[(c1, c1)] += lambda;
            let mut s = 0.0;
            for row in 0..6 {
                s += jac[(row, c1)] * weights[row] * r[row];
            }
            jtr[c1] = s;
        }
        let mut step = jtj
            .cholesky()
            .map(|ch| ch.solve(&(-&jtr)))
            .unwrap_or_else(|| DVector::zeros(n));
        // Trust-region style clamp keeps unreachable targets from blowing
        // the iteration up.
        let norm = step.norm();
        if !norm.is_finite() {
            return Ok((warm.clone(), f64::INFINITY));
        }
        if norm > 0.5 {
            step *= 0.5 / norm;
        }
        alpha += &step;
        if !alpha.iter().all(|a| a.is_finite()) {
            return Ok((warm.clone(), f64::INFINITY));
        }
        if step.norm() < 1e-10 {
            break;
        }
    }
    let fk = chain.fk(&alpha)?;
    let misfit = (fk.translation - target.translation).norm();
    Ok((alpha, misfit))
}

struct TruthBuild {
    alphas: Vec<DVector<f64>>,
    bases: Vec<Pose>,
    /// Contact pose per phase, in phase order.
    contact_poses: Vec<Pose>,
    switch_samples: Vec<usize>,
    last_index: usize,
    dt: f64,
}

impl TruthBuild {
    fn phase_at(&self, k: usize) -> usize {
        self.switch_samples.partition_point(|s| *s <= k)
    }

    fn phase_range(&self, phase: usize) -> (usize, usize) {
        let start = if phase == 0 { 0 } else { self.switch_samples[phase - 1] };
        let end = self.switch_samples.get(phase).copied().unwrap_or(self.last_index);
        (start, end)
    }

    /// True base velocity by differentiating positions within the sample's
    /// phase (velocity jumps at switch instants; the post-impact side is
    /// reported there).
    fn velocity(&self, k: usize) -> Vector3<f64> {
        let phase = self.phase_at(k);
        let (a, b) = self.phase_range(phase);
        let p = |i: usize| self.bases[i].translation;
        let dt = self.dt;
        if b == a {
            return Vector3::zeros();
        }
        if k == a {
            if a + 2 <= b {
                (-p(a + 2) + p(a + 1) * 4.0 - p(a) * 3.0) / (2.0 * dt)
            } else {
                (p(a + 1) - p(a)) / dt
            }
        } else if k == b {
            if b >= a + 2 {
                (p(b) * 3.0 - p(b - 1) * 4.0 + p(b - 2)) / (2.0 * dt)
            } else {
                (p(b) - p(b - 1)) / dt
            }
        } else {
            (p(k + 1) - p(k - 1)) / (2.0 * dt)
        }
    }

    /// Base pose at an arbitrary time: Catmull-Rom interpolation of the
    /// encoder-grid joint values, mapped through the pinned contact of the
    /// surrounding phase. Exact at grid samples.
    fn base_at(&self, robot: &RobotModel, t: f64) -> Result<Pose, SimError> {
        let n = self.last_index;
        let x = (t / self.dt).clamp(0.0, n as f64);
        let k = (x.floor() as usize).min(n - 1);
        let u = x - k as f64;
        if u.abs() < 1e-12 {
            return Ok(self.bases[k]);
        }
        let idx = |i: isize| -> usize { i.clamp(0, n as isize) as usize };
        let a0 = &self.alphas[idx(k as isize - 1)];
        let a1 = &self.alphas[k];
        let a2 = &self.alphas[idx(k as isize + 1)];
        let a3 = &self.alphas[idx(k as isize + 2)];
        let alpha = catmull_rom(a0, a1, a2, a3, u);
        // Phase of the open interval (k, k+1): switches sit exactly on grid
        // samples, so the interval interior belongs to the phase of k+1's
        // left limit, i.e. phase_at(k).
        let phase = self.phase_at(k);
        let frame = foot_of_phase(phase);
        let slice = leg_slice(frame);
        let chain_alpha = alpha.rows(slice.0, slice.1).clone_owned();
        let robot_chain = robot.chain(frame)?;
        let fk = robot_chain.fk(&chain_alpha)?;
        Ok(self.contact_poses[phase] * fk.inverse())
    }
}

fn leg_slice(frame: ContactFrame) -> (usize, usize) {
    match frame {
        ContactFrame::Left => (0, 5),
        ContactFrame::Right => (5, 5),
    }
}

fn catmull_rom(
    a0: &DVector<f64>,
    a1: &DVector<f64>,
    a2: &DVector<f64>,
    a3: &DVector<f64>,
    u: f64,
) -> DVector<f64> {
    let u2 = u * u;
    let u3 = u2 * u;
    a1 * (2.0 * u3 - 3.0 * u2 + 1.0)
        + a2 * (-2.0 * u3 + 3.0 * u2)
        + (a2 - a0) * (0.5 * (u3 - 2.0 * u2 + u))
        + (a3 - a1) * (0.5 * (u3 - u2))
}

/// Generates ground truth and the sensor record stream for a scenario.
pub fn generate(cfg: &ScenarioConfig) -> Result<(GroundTruth, Vec<DatasetRecord>), SimError> {
    cfg.validate()?;
    let robot = RobotModel::demo_biped();
    let dt = 1.0 / cfg.encoder_rate;
    let n_e = (cfg.duration * cfg.encoder_rate).round() as usize;

    // Switch schedule, snapped to the encoder grid.
    let mut switch_samples = Vec::new();
    for n in 1..=cfg.switch_count() {
        let k = (n as f64 * cfg.step_period / dt).round() as usize;
        if k == 0 || k > n_e {
            break;
        }
        switch_samples.push(k);
    }

    // Initial double-support posture from the template base.
    let x0 = template_base(cfg, 0.0);
    let bent = DVector::from_vec(vec![0.0, 0.4, -0.8, 0.4, 0.0]);
    let left_chain = robot.chain(ContactFrame::Left)?;
    let right_chain = robot.chain(ContactFrame::Right)?;
    let w_l0 = Pose::from_translation(Vector3::new(0.5 * cfg.step_length, HIP_HALF_WIDTH, 0.0));
    let w_r0 = Pose::from_translation(Vector3::new(-0.5 * cfg.step_length, -HIP_HALF_WIDTH, 0.0));
    let (alpha_l0, mis_l) = ik_solve(left_chain, &(x0.inverse() * w_l0), &bent, 100.0)?;
    let (alpha_r0, mis_r) = ik_solve(right_chain, &(x0.inverse() * w_r0), &bent, 100.0)?;
    let reachable = |m: f64| m.is_finite() && m <= FEASIBILITY_TOL;
    if !reachable(mis_l) || !reachable(mis_r) {
        return Err(SimError::InfeasibleConfig(format!(
            "initial stance unreachable (position misfit {:.3} m)",
            mis_l.max(mis_r)
        )));
    }

    let mut build = TruthBuild {
        alphas: Vec::with_capacity(n_e + 1),
        bases: Vec::with_capacity(n_e + 1),
        contact_poses: vec![x0 * left_chain.fk(&alpha_l0)?],
        switch_samples: switch_samples.clone(),
        last_index: n_e,
        dt,
    };
    // World pose of each phase's swing foot at lift-off.
    let mut swing_start = x0 * right_chain.fk(&alpha_r0)?;
    let mut warm_left = alpha_l0;
    let mut warm_right = alpha_r0;

    for k in 0..=n_e {
        let t = k as f64 * dt;
        // The switch sample itself is built with the outgoing stance leg so
        // the base stays continuous; the transfer happens afterwards.
        let phase_before = build.switch_samples.partition_point(|s| *s < k);
        let stance = foot_of_phase(phase_before);
        let swing = stance.other();
        let c_cur = build.contact_poses[phase_before];

        let template = template_base(cfg, t);
        let (stance_chain, stance_warm) = match stance {
            ContactFrame::Left => (left_chain, &mut warm_left),
            ContactFrame::Right => (right_chain, &mut warm_right),
        };
        let (alpha_st, _mis) = ik_solve(stance_chain, &(template.inverse() * c_cur), stance_warm, 1.0)?;
        *stance_warm = alpha_st.clone();
        let base = c_cur * stance_chain.fk(&alpha_st)?.inverse();

        // Swing trajectory in world space over the current phase.
        let (a_idx, b_idx) = build.phase_range(phase_before);
        let (t_a, t_b) = (a_idx as f64 * dt, b_idx as f64 * dt);
        let u = if t_b > t_a { ((t - t_a) / (t_b - t_a)).clamp(0.0, 1.0) } else { 1.0 };
        let s = quintic_smoothstep(u);
        let target = landing_target(cfg, phase_before + 1);
        let lift = SWING_LIFT * (std::f64::consts::PI * u).sin();
        let sw_pos = swing_start.translation * (1.0 - s) + target.translation * s
            + Vector3::new(0.0, 0.0, lift);
        let rot_delta = so3_log(&(swing_start.rotation.inverse() * target.rotation))
            .map_err(SimError::Manifold)?;
        let sw_rot = swing_start.rotation * crate::manifold::so3_exp(&(rot_delta * s));
        let w_swing = Pose::new(sw_rot, sw_pos);

        let (swing_chain, swing_warm) = match swing {
            ContactFrame::Left => (left_chain, &mut warm_left),
            ContactFrame::Right => (right_chain, &mut warm_right),
        };
        let (alpha_sw, mis) = ik_solve(swing_chain, &(base.inverse() * w_swing), swing_warm, 100.0)?;
        *swing_warm = alpha_sw.clone();
        if !(mis.is_finite() && mis <= FEASIBILITY_TOL) {
            return Err(SimError::InfeasibleConfig(format!(
                "swing target unreachable at t = {t:.3} (position misfit {mis:.4} m); \
                 reduce step_length or step height"
            )));
        }

        let mut alpha_full = DVector::zeros(robot.encoder_dim());
        let (l_off, l_len) = leg_slice(ContactFrame::Left);
        let (r_off, r_len) = leg_slice(ContactFrame::Right);
        let (alpha_l, alpha_r) = match stance {
            ContactFrame::Left => (&alpha_st, &alpha_sw),
            ContactFrame::Right => (&alpha_sw, &alpha_st),
        };
        alpha_full.rows_mut(l_off, l_len).copy_from(alpha_l);
        alpha_full.rows_mut(r_off, r_len).copy_from(alpha_r);
        build.alphas.push(alpha_full);
        build.bases.push(base);

        // Contact transfer exactly at the switch sample.
        if build.switch_samples.contains(&k) {
            let new_c = base * swing_chain.fk(&alpha_sw)?;
            swing_start = c_cur;
            build.contact_poses.push(new_c);
        }
    }

    // Ground-truth stream.
    let mut truth_samples = Vec::with_capacity(n_e + 1);
    for k in 0..=n_e {
        let phase = build.phase_at(k);
        truth_samples.push(TruthSample {
            t: k as f64 * dt,
            pose: build.bases[k],
            velocity: build.velocity(k),
            contact: build.contact_poses[phase],
            contact_frame: foot_of_phase(phase),
        });
    }
    let switches: Vec<SwitchRecord> = switch_samples
        .iter()
        .enumerate()
        .map(|(n, k)| SwitchRecord {
            t: *k as f64 * dt,
            from: foot_of_phase(n),
            to: foot_of_phase(n + 1),
        })
        .collect();
    let truth = GroundTruth { samples: truth_samples, switches };

    // IMU stream with per-keyframe-interval consistency corrections.
    let imu_records = synthesize_imu(cfg, &robot, &build, &truth)?;

    // Assemble the sensor records in deterministic order, then corrupt.
    let mut records: Vec<DatasetRecord> = Vec::new();
    for r in imu_records {
        records.push(r);
    }
    for k in 0..=n_e {
        let t = k as f64 * dt;
        let alpha: Vec<f64> = build.alphas[k].iter().cloned().collect();
        records.push(DatasetRecord::Encoder { t, alpha });
        let frame = foot_of_phase(build.phase_at(k));
        let mut contacts = std::collections::BTreeMap::new();
        contacts.insert("left".to_string(), frame == ContactFrame::Left);
        contacts.insert("right".to_string(), frame == ContactFrame::Right);
        records.push(DatasetRecord::Contact { t, contacts });
    }
    let kf_stride = (cfg.keyframe_dt * cfg.encoder_rate).round() as usize;
    let n_kf = cfg.keyframe_count();
    for f in 1..=n_kf {
        let (ka, kb) = ((f - 1) * kf_stride, f * kf_stride);
        if kb > n_e {
            break;
        }
        let rel = build.bases[ka].inverse() * build.bases[kb];
        records.push(DatasetRecord::RelPose {
            t: kb as f64 * dt,
            i: f - 1,
            j: f,
            q: rel.rotation.to_quaternion_wxyz(),
            p: [rel.translation[0], rel.translation[1], rel.translation[2]],
        });
    }
    records.sort_by(|a, b| {
        a.t()
            .partial_cmp(&b.t())
            .unwrap()
            .then_with(|| type_rank(a).cmp(&type_rank(b)))
    });

    apply_noise(cfg, &mut records);
    Ok((truth, records))
}

fn type_rank(r: &DatasetRecord) -> u8 {
    match r {
        DatasetRecord::Imu { .. } => 0,
        DatasetRecord::Encoder { .. } => 1,
        DatasetRecord::Contact { .. } => 2,
        DatasetRecord::RelPose { .. } => 3,
        DatasetRecord::Truth { .. } => 4,
    }
}

/// Gyro samples telescope the true rotation sequence; accelerometer samples
/// start from a numerically differentiated template and receive a
/// constant-plus-linear correction per keyframe interval so the discrete
/// preintegration reproduces the true keyframe states exactly.
fn synthesize_imu(
    cfg: &ScenarioConfig,
    robot: &RobotModel,
    build: &TruthBuild,
    truth: &GroundTruth,
) -> Result<Vec<DatasetRecord>, SimError> {
    let dt_i = 1.0 / cfg.imu_rate;
    let n_i = (cfg.duration * cfg.imu_rate).round() as usize;
    let same_grid = (cfg.imu_rate - cfg.encoder_rate).abs() < 1e-9;
    let pose_at = |j: usize| -> Result<Pose, SimError> {
        if same_grid {
            Ok(build.bases[j])
        } else {
            build.base_at(robot, j as f64 * dt_i)
        }
    };

    let mut poses = Vec::with_capacity(n_i + 1);
    for j in 0..=n_i {
        poses.push(pose_at(j)?);
    }
    let mut omegas = Vec::with_capacity(n_i);
    for j in 0..n_i {
        let rel = poses[j].rotation.inverse() * poses[j + 1].rotation;
        omegas.push(so3_log(&rel)? / dt_i);
    }
    // Nominal world specific force from a second difference of positions.
    let mut u_nominal = Vec::with_capacity(n_i);
    for j in 0..n_i {
        let jm = j.saturating_sub(1);
        let jp = (j + 1).min(n_i);
        let pddot = (poses[jp].translation - poses[j].translation * 2.0 + poses[jm].translation)
            / (dt_i * dt_i);
        u_nominal.push(pddot - GRAVITY);
    }

    let kf_stride_i = (cfg.keyframe_dt * cfg.imu_rate).round() as usize;
    let kf_stride_e = (cfg.keyframe_dt * cfg.encoder_rate).round() as usize;
    let n_kf = cfg.keyframe_count();
    let mut corrected = u_nominal.clone();
    for f in 0..n_kf {
        let (ja, jb) = (f * kf_stride_i, ((f + 1) * kf_stride_i).min(n_i));
        if jb <= ja + 1 {
            continue;
        }
        let n = jb - ja;
        let (ea, eb) = (f * kf_stride_e, (f + 1) * kf_stride_e);
        let (pa, pb) = (build.bases[ea].translation, build.bases[eb].translation);
        let (va, vb) = (truth.samples[ea].velocity, truth.samples[eb].velocity);
        let big_t = n as f64 * dt_i;
        let sum_u: Vector3<f64> = (ja..jb).map(|j| u_nominal[j] * dt_i).sum();
        let e_v = (vb - va - GRAVITY * big_t) - sum_u;
        let weight = |j: usize| dt_i * (big_t - (j - ja) as f64 * dt_i - 0.5 * dt_i);
        let sum_w_u: Vector3<f64> = (ja..jb).map(|j| u_nominal[j] * weight(j)).sum();
        let e_p = (pb - pa - va * big_t - GRAVITY * (0.5 * big_t * big_t)) - sum_w_u;
        let m = (n as f64 - 1.0) / 2.0;
        let sum_w: f64 = (ja..jb).map(weight).sum();
        let sum_wl: f64 = (ja..jb).map(|j| weight(j) * ((j - ja) as f64 - m)).sum();
        let c1 = e_v / big_t;
        let c2 = if sum_wl.abs() > 1e-12 { (e_p - c1 * sum_w) / sum_wl } else { Vector3::zeros() };
        for j in ja..jb {
            corrected[j] = u_nominal[j] + c1 + c2 * ((j - ja) as f64 - m);
        }
    }

    let mut records = Vec::with_capacity(n_i);
    for j in 0..n_i {
        let a_body = poses[j].rotation.inverse().rotate(&corrected[j]);
        records.push(DatasetRecord::Imu {
            t: j as f64 * dt_i,
            w: [omegas[j][0], omegas[j][1], omegas[j][2]],
            a: [a_body[0], a_body[1], a_body[2]],
        });
    }
    Ok(records)
}

/// Corrupts the sensor records in place with the configured noise levels,
/// drawing from a single seeded stream in record order.
fn apply_noise(cfg: &ScenarioConfig, records: &mut [DatasetRecord]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt_i = 1.0 / cfg.imu_rate;
    let gyro_sd = cfg.sigma_gyro / dt_i.sqrt();
    let accel_sd = cfg.sigma_accel / dt_i.sqrt();
    let normal = |sd: f64, rng: &mut ChaCha8Rng| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        sd * z
    };
    for rec in records.iter_mut() {
        match rec {
            DatasetRecord::Imu { w, a, .. } => {
                for v in w.iter_mut() {
                    *v += normal(gyro_sd, &mut rng);
                }
                for v in a.iter_mut() {
                    *v += normal(accel_sd, &mut rng);
                }
            }
            DatasetRecord::Encoder { alpha, .. } => {
                for v in alpha.iter_mut() {
                    *v += normal(cfg.sigma_alpha, &mut rng);
                }
            }
            DatasetRecord::RelPose { q, p, .. } => {
                let mut xi = Vector6::zeros();
                for i in 0..3 {
                    xi[i] = normal(cfg.sigma_relpose_rot, &mut rng);
                    xi[i + 3] = normal(cfg.sigma_relpose_pos, &mut rng);
                }
                let rel = Pose::new(Rotation::from_quaternion_wxyz(*q), Vector3::new(p[0], p[1], p[2]));
                let noisy = rel * se3_exp(&Twist::from_vector(&xi));
                *q = noisy.rotation.to_quaternion_wxyz();
                *p = [noisy.translation[0], noisy.translation[1], noisy.translation[2]];
            }
            DatasetRecord::Contact { .. } | DatasetRecord::Truth { .. } => {}
        }
    }
}

/// Removes relative-pose records with timestamps inside any of the windows
/// (inclusive); every other stream is untouched.
pub fn apply_dropout(records: &[DatasetRecord], windows: &[(f64, f64)]) -> Vec<DatasetRecord> {
    records
        .iter()
        .filter(|r| match r {
            DatasetRecord::RelPose { t, .. } => {
                !windows.iter().any(|(t0, t1)| *t >= *t0 && *t <= *t1)
            }
            _ => true,
        })
        .cloned()
        .collect()
}

/// The estimator-side contact slip model matching a scenario config.
pub fn contact_noise_model(cfg: &ScenarioConfig) -> crate::contact::ContactNoiseModel {
    crate::contact::ContactNoiseModel::isotropic(cfg.sigma_contact_omega, cfg.sigma_contact_v)
}

/// The estimator-side relative-pose covariance matching a scenario config.
pub fn relpose_covariance(cfg: &ScenarioConfig) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let rr = cfg.sigma_relpose_rot.max(1e-6);
    let pp = cfg.sigma_relpose_pos.max(1e-6);
    for i in 0..3 {
        m[(i, i)] = rr * rr;
        m[(i + 3, i + 3)] = pp * pp;
    }
    m
}
