//! Dataset-to-graph assembly: segments sensor records into keyframe
//! intervals, preintegrates the high-rate streams, initializes the state
//! nodes, and builds the factor graph for a selected odometry variant.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use thiserror::Error;

use crate::contact::{ContactError, ContactNoiseModel, PreintegratedContact, SwitchEvent};
use crate::eval::TrajectoryPoint;
use crate::graph::{
    bias_walk_factor, contact_factor, fk_factor, imu_factor, prior_factor, relpose_factor,
    terrain_factor, FactorGraph, GraphError, LmOptions, SolveReport, StateNode,
};
use crate::imu::{integrate_deltas, ImuBias, ImuNoise, ImuSample, GRAVITY};
use crate::io::DatasetRecord;
use crate::kinematics::{ContactFrame, EncoderReading, KinematicsError, RobotModel};
use crate::manifold::{adjoint, Pose, Rotation};

/// Errors raised while assembling or solving an estimation problem.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset problem: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Which factor families enter the graph. Contact always implies the
/// forward-kinematic factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSet {
    /// Visual + inertial + contact (and FK).
    Vic,
    /// Inertial + contact (and FK).
    Ic,
    /// Visual + inertial.
    Vi,
    /// Inertial only.
    I,
}

impl FactorSet {
    pub fn parse(s: &str) -> Option<FactorSet> {
        match s.to_ascii_lowercase().as_str() {
            "vic" => Some(FactorSet::Vic),
            "ic" => Some(FactorSet::Ic),
            "vi" => Some(FactorSet::Vi),
            "i" => Some(FactorSet::I),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FactorSet::Vic => "vic",
            FactorSet::Ic => "ic",
            FactorSet::Vi => "vi",
            FactorSet::I => "i",
        }
    }

    pub fn has_vision(&self) -> bool {
        matches!(self, FactorSet::Vic | FactorSet::Vi)
    }

    pub fn has_contact(&self) -> bool {
        matches!(self, FactorSet::Vic | FactorSet::Ic)
    }
}

/// Estimator configuration: factor selection plus the sensor noise models
/// assumed by the graph.
#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub factor_set: FactorSet,
    pub keyframe_dt: f64,
    pub terrain: bool,
    pub terrain_height: f64,
    pub sigma_terrain_z: f64,
    pub sigma_alpha: f64,
    pub contact_noise: ContactNoiseModel,
    pub imu_noise: ImuNoise,
    pub relpose_covariance: Matrix6<f64>,
    /// One-sigma prior on the initial state blocks
    /// (rotation, position, velocity, contact, bias).
    pub prior_sigmas: [f64; 5],
    pub lm: LmOptions,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let mut relpose_cov = Matrix6::zeros();
        for i in 0..3 {
            relpose_cov[(i, i)] = 1e-4;
            relpose_cov[(i + 3, i + 3)] = 1e-4;
        }
        EstimatorConfig {
            factor_set: FactorSet::Vic,
            keyframe_dt: 0.25,
            terrain: false,
            terrain_height: 0.0,
            sigma_terrain_z: 0.01,
            sigma_alpha: 1e-3,
            contact_noise: ContactNoiseModel::default(),
            imu_noise: ImuNoise::default(),
            relpose_covariance: relpose_cov,
            prior_sigmas: [1e-4, 1e-4, 1.0, 1e-4, 1e-3],
            lm: LmOptions::default(),
        }
    }
}

/// Sensor streams split out of a record stream.
struct Streams {
    imu: Vec<ImuSample>,
    encoders: Vec<(f64, DVector<f64>)>,
    contacts: Vec<(f64, bool, bool)>,
    relposes: Vec<(f64, usize, usize, Pose)>,
}

fn split_streams(records: &[DatasetRecord]) -> Streams {
    let mut s = Streams { imu: Vec::new(), encoders: Vec::new(), contacts: Vec::new(), relposes: Vec::new() };
    for r in records {
        match r {
            DatasetRecord::Imu { t, w, a } => s.imu.push(ImuSample {
                t: *t,
                omega: Vector3::new(w[0], w[1], w[2]),
                accel: Vector3::new(a[0], a[1], a[2]),
            }),
            DatasetRecord::Encoder { t, alpha } => {
                s.encoders.push((*t, DVector::from_vec(alpha.clone())))
            }
            DatasetRecord::Contact { t, contacts } => s.contacts.push((
                *t,
                contacts.get("left").copied().unwrap_or(false),
                contacts.get("right").copied().unwrap_or(false),
            )),
            DatasetRecord::RelPose { t, i, j, q, p } => s.relposes.push((
                *t,
                *i,
                *j,
                Pose::new(Rotation::from_quaternion_wxyz(*q), Vector3::new(p[0], p[1], p[2])),
            )),
            DatasetRecord::Truth { .. } => {}
        }
    }
    s
}

/// The tracked contact frame over the encoder grid, following the
/// persistence rule: the current frame is kept until its own contact bit
/// drops, then the tracking transfers to the other foot in contact.
fn tracked_frames(contacts: &[(f64, bool, bool)]) -> Result<Vec<(f64, ContactFrame)>, PipelineError> {
    let first = contacts
        .iter()
        .find(|(_, l, r)| *l || *r)
        .ok_or_else(|| PipelineError::BadDataset("no contact sample reports a stance foot".into()))?;
    let mut cur = if first.1 { ContactFrame::Left } else { ContactFrame::Right };
    let mut out = Vec::with_capacity(contacts.len());
    for (t, left, right) in contacts {
        let bit = match cur {
            ContactFrame::Left => *left,
            ContactFrame::Right => *right,
        };
        if !bit {
            let other = cur.other();
            let other_bit = match other {
                ContactFrame::Left => *left,
                ContactFrame::Right => *right,
            };
            if other_bit {
                cur = other;
            }
            // Both feet off the ground: keep tracking the last frame.
        }
        out.push((*t, cur));
    }
    Ok(out)
}

/// A built estimation problem, ready to solve.
pub struct Problem {
    pub graph: FactorGraph,
    pub keyframe_times: Vec<f64>,
    pub robot: Arc<RobotModel>,
    pub factor_set: FactorSet,
}

impl Problem {
    pub fn solve(&mut self, opts: &LmOptions) -> Result<SolveReport, GraphError> {
        self.graph.solve_lm(opts)
    }

    /// Estimated base trajectory at the keyframes.
    pub fn trajectory(&self) -> Vec<TrajectoryPoint> {
        self.graph
            .nodes()
            .map(|n| TrajectoryPoint { t: n.t, pose: n.pose })
            .collect()
    }

    /// Rows `(t, qw, qx, qy, qz, px, py, pz, vx, vy, vz, bg, ba)` for the
    /// trajectory CSV.
    pub fn trajectory_rows(&self) -> Vec<Vec<f64>> {
        self.graph
            .nodes()
            .map(|n| {
                let q = n.pose.rotation.to_quaternion_wxyz();
                let p = n.pose.translation;
                let b = n.bias;
                vec![
                    n.t, q[0], q[1], q[2], q[3], p[0], p[1], p[2],
                    n.velocity[0], n.velocity[1], n.velocity[2],
                    b.gyro[0], b.gyro[1], b.gyro[2], b.accel[0], b.accel[1], b.accel[2],
                ]
            })
            .collect()
    }

    /// Per-keyframe log-determinant of the base-pose marginal covariance.
    pub fn pose_logdets(&self) -> Result<Vec<(f64, f64)>, GraphError> {
        let times: BTreeMap<usize, f64> = self.graph.nodes().map(|n| (n.key, n.t)).collect();
        Ok(self
            .graph
            .all_base_pose_logdets()?
            .into_iter()
            .map(|(k, v)| (times[&k], v))
            .collect())
    }
}

fn nearest_sample<'a, T>(samples: &'a [(f64, T)], t: f64, tol: f64) -> Option<&'a (f64, T)> {
    let idx = samples.partition_point(|(ts, _)| *ts < t);
    let mut best: Option<(f64, &(f64, T))> = None;
    for i in [idx.wrapping_sub(1), idx] {
        if let Some(s) = samples.get(i) {
            let d = (s.0 - t).abs();
            if d <= tol && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, s));
            }
        }
    }
    best.map(|(_, s)| s)
}

/// Builds the factor graph for the selected variant from a record stream,
/// anchored at the identity pose.
///
/// Keyframes sit on the grid `k * keyframe_dt` and must coincide with
/// encoder samples. Initial estimates come from dead reckoning: the relpose
/// chain when vision is available, contact/kinematic odometry otherwise,
/// and IMU integration as the fallback (always for velocity).
pub fn build_problem(records: &[DatasetRecord], cfg: &EstimatorConfig) -> Result<Problem, PipelineError> {
    // Terrain factors tie contact poses to the map height, so the gauge
    // anchor must respect the robot's true height above the map; standing
    // kinematics provide it.
    let anchor = if cfg.terrain && cfg.factor_set.has_contact() {
        let first_contact = records.iter().find_map(|r| match r {
            DatasetRecord::Contact { contacts, .. } => Some(if contacts.get("left").copied().unwrap_or(false) {
                ContactFrame::Left
            } else {
                ContactFrame::Right
            }),
            _ => None,
        });
        let first_alpha = records.iter().find_map(|r| match r {
            DatasetRecord::Encoder { alpha, .. } => Some(DVector::from_vec(alpha.clone())),
            _ => None,
        });
        match (first_contact, first_alpha) {
            (Some(frame), Some(alpha)) => {
                let robot = RobotModel::demo_biped();
                let h_bc = robot.fk_base_to_contact(frame, &alpha)?;
                Pose::from_translation(Vector3::new(0.0, 0.0, cfg.terrain_height - h_bc.translation[2]))
            }
            _ => Pose::identity(),
        }
    } else {
        Pose::identity()
    };
    build_problem_anchored(records, cfg, anchor, None)
}

/// [`build_problem`] with an explicit initial pose (and optionally velocity)
/// anchoring node 0; the graph prior is centered there.
pub fn build_problem_anchored(
    records: &[DatasetRecord],
    cfg: &EstimatorConfig,
    anchor_pose: Pose,
    anchor_velocity: Option<Vector3<f64>>,
) -> Result<Problem, PipelineError> {
    let robot = Arc::new(RobotModel::demo_biped());
    let streams = split_streams(records);
    if streams.imu.is_empty() {
        return Err(PipelineError::BadDataset("dataset has no imu records".into()));
    }
    if streams.encoders.is_empty() {
        return Err(PipelineError::BadDataset("dataset has no encoder records".into()));
    }
    let t_last = streams
        .encoders
        .last()
        .map(|(t, _)| *t)
        .unwrap_or(0.0);
    let n_kf = (t_last / cfg.keyframe_dt + 1e-9).floor() as usize;
    if n_kf == 0 {
        return Err(PipelineError::BadDataset("dataset shorter than one keyframe interval".into()));
    }
    let keyframe_times: Vec<f64> = (0..=n_kf).map(|k| k as f64 * cfg.keyframe_dt).collect();
    let enc_tol = 1e-6;

    let encoder_at = |t: f64| -> Result<EncoderReading, PipelineError> {
        let (ts, alpha) = nearest_sample(&streams.encoders, t, enc_tol)
            .ok_or_else(|| PipelineError::BadDataset(format!("no encoder sample at t = {t}")))?;
        Ok(EncoderReading::isotropic(*ts, alpha.clone(), cfg.sigma_alpha))
    };

    // Tracked frame and switch events over the contact stream.
    let use_contact = cfg.factor_set.has_contact();
    let tracked = if use_contact {
        let frames = tracked_frames(&streams.contacts)?;
        Some(frames)
    } else {
        None
    };
    let mut switch_events: Vec<SwitchEvent> = Vec::new();
    if let Some(frames) = &tracked {
        for w in frames.windows(2) {
            let (_, f0) = w[0];
            let (t1, f1) = w[1];
            if f0 != f1 {
                switch_events.push(SwitchEvent::new(t1, f0, f1, encoder_at(t1)?)?);
            }
        }
    }
    let frame_at = |t: f64| -> Result<ContactFrame, PipelineError> {
        let frames = tracked.as_ref().expect("contact tracking enabled");
        let idx = frames.partition_point(|(ts, _)| *ts <= t + enc_tol);
        if idx == 0 {
            return Ok(frames[0].1);
        }
        Ok(frames[idx - 1].1)
    };

    // Per-interval preintegration.
    let mut imu_chunks: Vec<(Vec<ImuSample>, f64)> = Vec::with_capacity(n_kf);
    for k in 0..n_kf {
        let (ta, tb) = (keyframe_times[k], keyframe_times[k + 1]);
        let lo = streams.imu.partition_point(|s| s.t < ta - 1e-9);
        let hi = streams.imu.partition_point(|s| s.t < tb - 1e-9);
        if lo == hi {
            return Err(PipelineError::BadDataset(format!("no imu samples in interval {ta}..{tb}")));
        }
        imu_chunks.push((streams.imu[lo..hi].to_vec(), tb));
    }
    let mut contact_preints: Vec<PreintegratedContact> = Vec::new();
    if use_contact {
        for k in 0..n_kf {
            let (ta, tb) = (keyframe_times[k], keyframe_times[k + 1]);
            let mut p = PreintegratedContact::new(k);
            // Stance flow between encoder samples, switch resets at their
            // exact timestamps (switches are grid samples, so flow and reset
            // never share a sample).
            let lo = streams.encoders.partition_point(|(t, _)| *t < ta - 1e-9);
            let hi = streams.encoders.partition_point(|(t, _)| *t < tb - 1e-9);
            let mut events: Vec<&SwitchEvent> = switch_events
                .iter()
                .filter(|e| e.t > ta + 1e-9 && e.t <= tb + 1e-9)
                .collect();
            events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
            let mut ev_iter = events.into_iter().peekable();
            for i in lo..=hi {
                let t0 = if i == lo { ta } else { streams.encoders[i].0 };
                let t1 = if i == hi { tb } else { streams.encoders[i + 1].0 };
                if t1 > t0 + 1e-12 {
                    p.stance_step(t1 - t0, &cfg.contact_noise)?;
                }
                while let Some(ev) = ev_iter.peek() {
                    if ev.t <= t1 + 1e-9 {
                        p.switch(&robot, (*ev).clone())?;
                        ev_iter.next();
                    } else {
                        break;
                    }
                }
            }
            contact_preints.push(p);
        }
    }

    // Relpose measurements between our keyframes, composing dataset records
    // when the requested keyframe spacing spans several of them.
    let mut relpose_between: BTreeMap<(usize, usize), (Pose, Matrix6<f64>)> = BTreeMap::new();
    if cfg.factor_set.has_vision() && !streams.relposes.is_empty() {
        // Dataset relpose interval from the median spacing.
        let rel_ts: Vec<f64> = streams.relposes.iter().map(|(t, _, _, _)| *t).collect();
        let mut diffs: Vec<f64> = rel_ts.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 1e-9).collect();
        diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let base_dt = diffs.get(diffs.len() / 2).copied().unwrap_or(cfg.keyframe_dt);
        let per = (cfg.keyframe_dt / base_dt).round() as usize;
        if per == 0 || (cfg.keyframe_dt - per as f64 * base_dt).abs() > 1e-6 {
            return Err(PipelineError::BadDataset(format!(
                "keyframe_dt {} is not a multiple of the dataset relpose interval {base_dt}",
                cfg.keyframe_dt
            )));
        }
        for k in 0..n_kf {
            let (ta, tb) = (keyframe_times[k], keyframe_times[k + 1]);
            // Gather the `per` consecutive records covering (ta, tb].
            let mut chain: Vec<&(f64, usize, usize, Pose)> = streams
                .relposes
                .iter()
                .filter(|(t, _, _, _)| *t > ta + 1e-9 && *t <= tb + 1e-9)
                .collect();
            chain.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if chain.len() != per {
                continue; // vision gap (dropout): no factor for this interval
            }
            let mut rel = Pose::identity();
            let mut cov = Matrix6::zeros();
            for (_, _, _, pose) in &chain {
                let ad = adjoint(&pose.inverse());
                cov = ad * cov * ad.transpose() + cfg.relpose_covariance;
                rel = rel * *pose;
            }
            relpose_between.insert((k, k + 1), (rel, cov));
        }
    }

    // Initial estimates by dead reckoning from the anchor. The starting
    // velocity comes from the anchor when given, else from the first
    // relpose or kinematic-odometry interval.
    let mut nodes: Vec<StateNode> = Vec::with_capacity(n_kf + 1);
    let mut pose = anchor_pose;
    let bias = ImuBias::zero();
    let mut velocity = match anchor_velocity {
        Some(v) => v,
        None => {
            if let Some((rel, _)) = relpose_between.get(&(0, 1)) {
                anchor_pose.rotation.rotate(&rel.translation) / cfg.keyframe_dt
            } else if use_contact {
                let reading0 = encoder_at(keyframe_times[0])?;
                let c0 = anchor_pose * robot.fk_base_to_contact(frame_at(keyframe_times[0])?, &reading0.alpha)?;
                let c1 = c0 * *contact_preints[0].delta_c();
                let reading1 = encoder_at(keyframe_times[1])?;
                let x1 = c1 * robot.fk_base_to_contact(frame_at(keyframe_times[1])?, &reading1.alpha)?.inverse();
                (x1.translation - anchor_pose.translation) / cfg.keyframe_dt
            } else {
                Vector3::zeros()
            }
        }
    };
    for k in 0..=n_kf {
        let t = keyframe_times[k];
        if k > 0 {
            let (samples, t_end) = &imu_chunks[k - 1];
            let (delta_r, delta_v, delta_p, dt) = integrate_deltas(samples, *t_end, &bias)
                .map_err(|e| PipelineError::BadDataset(e.to_string()))?;
            let imu_pose = Pose::new(
                pose.rotation * delta_r,
                pose.translation + velocity * dt + GRAVITY * (0.5 * dt * dt) + pose.rotation.rotate(&delta_p),
            );
            let new_velocity = velocity + GRAVITY * dt + pose.rotation.rotate(&delta_v);
            pose = if let Some((rel, _)) = relpose_between.get(&(k - 1, k)) {
                pose * *rel
            } else if use_contact {
                // Kinematic odometry: carry the contact pose through the
                // interval's preintegrated transfer, then hang the base off
                // the measured leg.
                let c_prev = nodes[k - 1].contact.expect("contact initialized");
                let c_now = c_prev * *contact_preints[k - 1].delta_c();
                let reading = encoder_at(t)?;
                let h_bc = robot.fk_base_to_contact(frame_at(t)?, &reading.alpha)?;
                c_now * h_bc.inverse()
            } else {
                imu_pose
            };
            velocity = new_velocity;
        }
        let contact = if use_contact {
            let reading = encoder_at(t)?;
            let h_bc = robot.fk_base_to_contact(frame_at(t)?, &reading.alpha)?;
            Some(pose * h_bc)
        } else {
            None
        };
        nodes.push(StateNode::new(k, t, pose, velocity, contact, bias));
    }

    // Assemble the graph.
    let mut graph = FactorGraph::new();
    for n in &nodes {
        graph.add_node(n.clone())?;
    }
    let prior_mean = nodes[0].clone();
    let dim0 = prior_mean.tangent_dim();
    let mut prior_cov = DMatrix::zeros(dim0, dim0);
    let [s_rot, s_pos, s_vel, s_con, s_bias] = cfg.prior_sigmas;
    for i in 0..3 {
        prior_cov[(i, i)] = s_rot * s_rot;
        prior_cov[(3 + i, 3 + i)] = s_pos * s_pos;
        prior_cov[(6 + i, 6 + i)] = s_vel * s_vel;
    }
    if cfg.terrain {
        // Absolute height is informed by the terrain factors; the prior only
        // pins the truly unobservable directions tightly.
        prior_cov[(5, 5)] = 0.1 * 0.1;
    }
    let b0 = if prior_mean.contact.is_some() {
        for i in 0..6 {
            prior_cov[(9 + i, 9 + i)] = s_con * s_con;
        }
        15
    } else {
        9
    };
    for i in 0..6 {
        prior_cov[(b0 + i, b0 + i)] = s_bias * s_bias;
    }
    graph.add_factor(prior_factor(prior_mean, prior_cov)?)?;

    let mut walk_cov = Matrix6::zeros();
    for i in 0..3 {
        let g = cfg.imu_noise.sigma_gyro_walk;
        let a = cfg.imu_noise.sigma_accel_walk;
        walk_cov[(i, i)] = g * g * cfg.keyframe_dt;
        walk_cov[(3 + i, 3 + i)] = a * a * cfg.keyframe_dt;
    }
    for k in 0..n_kf {
        let (samples, t_end) = imu_chunks[k].clone();
        graph.add_factor(imu_factor(k, k + 1, samples, t_end, &cfg.imu_noise, GRAVITY, &bias)?)?;
        graph.add_factor(bias_walk_factor(k, k + 1, walk_cov)?)?;
        if let Some((rel, cov)) = relpose_between.get(&(k, k + 1)) {
            graph.add_factor(relpose_factor(k, k + 1, *rel, *cov)?)?;
        }
        if use_contact {
            graph.add_factor(contact_factor(k, k + 1, contact_preints[k].clone())?)?;
        }
    }
    if use_contact {
        for k in 0..=n_kf {
            let t = keyframe_times[k];
            graph.add_factor(fk_factor(k, robot.clone(), encoder_at(t)?, frame_at(t)?)?)?;
            if cfg.terrain {
                graph.add_factor(terrain_factor(k, cfg.terrain_height, cfg.sigma_terrain_z)?)?;
            }
        }
    } else if cfg.terrain {
        return Err(PipelineError::BadDataset(
            "terrain factors require a factor set with contact (vic or ic)".into(),
        ));
    }

    Ok(Problem { graph, keyframe_times, robot, factor_set: cfg.factor_set })
}

/// Reads truth records into trajectory points.
pub fn truth_trajectory(records: &[DatasetRecord]) -> Vec<TrajectoryPoint> {
    records
        .iter()
        .filter_map(|r| match r {
            DatasetRecord::Truth { t, x_q, x_p, .. } => Some(TrajectoryPoint {
                t: *t,
                pose: Pose::new(
                    Rotation::from_quaternion_wxyz(*x_q),
                    Vector3::new(x_p[0], x_p[1], x_p[2]),
                ),
            }),
            _ => None,
        })
        .collect()
}

/// Truth base z-coordinate series, for terrain-drift comparisons.
pub fn truth_heights(records: &[DatasetRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| match r {
            DatasetRecord::Truth { t, x_p, .. } => Some((*t, x_p[2])),
            _ => None,
        })
        .collect()
}

/// Anchors the estimator at the true initial state instead of the origin:
/// used by exactness tests where the solution is compared against truth in
/// the world frame.
pub fn build_problem_with_truth_prior(
    records: &[DatasetRecord],
    truth: &[DatasetRecord],
    cfg: &EstimatorConfig,
) -> Result<Problem, PipelineError> {
    let first = truth
        .iter()
        .find_map(|r| match r {
            DatasetRecord::Truth { x_q, x_p, v, .. } => Some((
                Pose::new(Rotation::from_quaternion_wxyz(*x_q), Vector3::new(x_p[0], x_p[1], x_p[2])),
                Vector3::new(v[0], v[1], v[2]),
            )),
            _ => None,
        })
        .ok_or_else(|| PipelineError::BadDataset("truth stream has no records".into()))?;
    build_problem_anchored(records, cfg, first.0, Some(first.1))
}
