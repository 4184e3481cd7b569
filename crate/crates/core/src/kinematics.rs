//! Kinematic chains with revolute and prismatic joints.
//!
//! Computes the base-to-contact transform `H_BC(alpha)`, the contact-transfer
//! transform `H_C-C+(alpha)`, body manipulator Jacobians (numerically, by
//! central differences on the manifold), and the forward-kinematic factor's
//! residual and covariance.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use thiserror::Error;

use crate::manifold::{se3_log, ManifoldError, Pose, Rotation, TangentCovariance, Twist};

/// Step size for the central-difference body Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Diagonal regularization added to the FK factor covariance; `J S J^T` is
/// singular whenever the chain has fewer than six joints or sits at a
/// kinematic singularity.
pub const FK_COVARIANCE_REGULARIZATION: f64 = 1e-9;

/// Errors raised by kinematics operations.
#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("encoder vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no kinematic chain registered for frame {0:?}")]
    UnknownFrame(ContactFrame),
    #[error("no kinematic chains registered for frame pair {from:?} -> {to:?}")]
    UnknownFramePair { from: ContactFrame, to: ContactFrame },
    #[error("robot description line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("encoder covariance is not symmetric positive semidefinite")]
    BadCovariance,
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// Which foot a contact frame is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContactFrame {
    Left,
    Right,
}

impl ContactFrame {
    pub fn other(&self) -> ContactFrame {
        match self {
            ContactFrame::Left => ContactFrame::Right,
            ContactFrame::Right => ContactFrame::Left,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ContactFrame::Left => "left",
            ContactFrame::Right => "right",
        }
    }

    pub fn from_label(label: &str) -> Option<ContactFrame> {
        match label.to_ascii_lowercase().as_str() {
            "left" => Some(ContactFrame::Left),
            "right" => Some(ContactFrame::Right),
            _ => None,
        }
    }
}

/// Revolute joints displace by an angle about their axis, prismatic joints
/// by a distance along it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One joint: a fixed transform from the parent link frame to the joint
/// frame, then motion about/along a unit axis.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub name: String,
    pub kind: JointKind,
    pub axis: Vector3<f64>,
    pub parent_offset: Pose,
}

impl JointModel {
    /// Normalizes the axis; a zero axis is rejected.
    pub fn new(
        name: impl Into<String>,
        kind: JointKind,
        axis: Vector3<f64>,
        parent_offset: Pose,
    ) -> Result<Self, KinematicsError> {
        let n = axis.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(KinematicsError::Parse { line: 0, msg: "joint axis must be nonzero".into() });
        }
        Ok(JointModel { name: name.into(), kind, axis: axis / n, parent_offset })
    }

    /// The motion transform for a single joint displacement.
    pub fn motion(&self, displacement: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => Pose::new(
                Rotation::from_axis_angle(&(self.axis * displacement)),
                Vector3::zeros(),
            ),
            JointKind::Prismatic => Pose::from_translation(self.axis * displacement),
        }
    }
}

/// A serial chain from the base frame to an end (contact) frame.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<JointModel>,
    pub end_offset: Pose,
}

impl KinematicChain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Forward kinematics: the product of `parent_offset * motion(alpha_i)`
    /// terms followed by the end offset.
    pub fn fk(&self, alpha: &DVector<f64>) -> Result<Pose, KinematicsError> {
        if alpha.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch { expected: self.dof(), got: alpha.len() });
        }
        let mut h = Pose::identity();
        for (joint, &a) in self.joints.iter().zip(alpha.iter()) {
            h = h * joint.parent_offset * joint.motion(a);
        }
        Ok(h * self.end_offset)
    }

    /// Body manipulator Jacobian of [`KinematicChain::fk`]: the 6xN matrix J
    /// with `FK(a + da) ~ FK(a) * Exp(J da)`, by central differences.
    pub fn body_jacobian(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>, KinematicsError> {
        numeric_body_jacobian(|a| self.fk(a), alpha)
    }
}

/// An encoder measurement: joint displacements plus their covariance.
#[derive(Debug, Clone)]
pub struct EncoderReading {
    pub t: f64,
    pub alpha: DVector<f64>,
    pub sigma_alpha: DMatrix<f64>,
}

impl EncoderReading {
    /// Validates that the covariance is square of matching dimension and
    /// symmetric PSD (to 1e-10).
    pub fn new(t: f64, alpha: DVector<f64>, sigma_alpha: DMatrix<f64>) -> Result<Self, KinematicsError> {
        let n = alpha.len();
        if sigma_alpha.nrows() != n || sigma_alpha.ncols() != n {
            return Err(KinematicsError::DimensionMismatch { expected: n, got: sigma_alpha.nrows() });
        }
        let asym = (&sigma_alpha - sigma_alpha.transpose()).norm();
        if asym > 1e-10 {
            return Err(KinematicsError::BadCovariance);
        }
        let sym = (&sigma_alpha + sigma_alpha.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(KinematicsError::BadCovariance);
        }
        Ok(EncoderReading { t, alpha, sigma_alpha })
    }

    /// Isotropic encoder noise, the common case.
    pub fn isotropic(t: f64, alpha: DVector<f64>, sigma: f64) -> Self {
        let n = alpha.len();
        EncoderReading { t, alpha, sigma_alpha: DMatrix::identity(n, n) * sigma * sigma }
    }
}

/// The robot: one kinematic chain per foot, all driven by a single stacked
/// encoder vector (chains own disjoint slices of it, in registration order).
#[derive(Debug, Clone)]
pub struct RobotModel {
    chains: Vec<(ContactFrame, KinematicChain)>,
    offsets: Vec<usize>,
    encoder_dim: usize,
}

impl RobotModel {
    pub fn new(chains: Vec<(ContactFrame, KinematicChain)>) -> Result<Self, KinematicsError> {
        if chains.is_empty() {
            return Err(KinematicsError::Parse { line: 0, msg: "robot has no chains".into() });
        }
        let mut offsets = Vec::with_capacity(chains.len());
        let mut dim = 0usize;
        for (_, chain) in &chains {
            if chain.joints.is_empty() {
                return Err(KinematicsError::Parse {
                    line: 0,
                    msg: format!("chain '{}' has no joints", chain.name),
                });
            }
            offsets.push(dim);
            dim += chain.dof();
        }
        Ok(RobotModel { chains, offsets, encoder_dim: dim })
    }

    /// Total encoder-vector dimension across all chains.
    pub fn encoder_dim(&self) -> usize {
        self.encoder_dim
    }

    pub fn frames(&self) -> impl Iterator<Item = ContactFrame> + '_ {
        self.chains.iter().map(|(f, _)| *f)
    }

    pub fn chain(&self, frame: ContactFrame) -> Result<&KinematicChain, KinematicsError> {
        self.chains
            .iter()
            .find(|(f, _)| *f == frame)
            .map(|(_, c)| c)
            .ok_or(KinematicsError::UnknownFrame(frame))
    }

    fn slice(&self, frame: ContactFrame) -> Result<(usize, usize), KinematicsError> {
        self.chains
            .iter()
            .position(|(f, _)| *f == frame)
            .map(|i| (self.offsets[i], self.chains[i].1.dof()))
            .ok_or(KinematicsError::UnknownFrame(frame))
    }

    fn check_dim(&self, alpha: &DVector<f64>) -> Result<(), KinematicsError> {
        if alpha.len() != self.encoder_dim {
            return Err(KinematicsError::DimensionMismatch { expected: self.encoder_dim, got: alpha.len() });
        }
        Ok(())
    }

    /// `H_BC(alpha)` for one foot, from the stacked encoder vector.
    pub fn fk_base_to_contact(&self, frame: ContactFrame, alpha: &DVector<f64>) -> Result<Pose, KinematicsError> {
        self.check_dim(alpha)?;
        let (off, len) = self.slice(frame)?;
        let chain = self.chain(frame)?;
        chain.fk(&alpha.rows(off, len).clone_owned())
    }

    /// `H_C-C+(alpha) = H_BC-(alpha)^{-1} H_BC+(alpha)`: transfers the
    /// contact frame from `from` to `to`. The self-transfer is the identity.
    pub fn fk_contact_to_contact(
        &self,
        from: ContactFrame,
        to: ContactFrame,
        alpha: &DVector<f64>,
    ) -> Result<Pose, KinematicsError> {
        let h_from = self
            .fk_base_to_contact(from, alpha)
            .map_err(|e| reframe_pair_error(e, from, to))?;
        let h_to = self
            .fk_base_to_contact(to, alpha)
            .map_err(|e| reframe_pair_error(e, from, to))?;
        Ok(h_from.inverse() * h_to)
    }

    /// Body Jacobian of [`RobotModel::fk_base_to_contact`] with respect to
    /// the full encoder vector (columns of other chains are zero).
    pub fn body_jacobian_base_to_contact(
        &self,
        frame: ContactFrame,
        alpha: &DVector<f64>,
    ) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_dim(alpha)?;
        self.slice(frame)?;
        numeric_body_jacobian(|a| self.fk_base_to_contact(frame, a), alpha)
    }

    /// Body Jacobian of [`RobotModel::fk_contact_to_contact`] with respect to
    /// the full encoder vector.
    pub fn body_jacobian_contact_to_contact(
        &self,
        from: ContactFrame,
        to: ContactFrame,
        alpha: &DVector<f64>,
    ) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_dim(alpha)?;
        self.slice(from).map_err(|e| reframe_pair_error(e, from, to))?;
        self.slice(to).map_err(|e| reframe_pair_error(e, from, to))?;
        numeric_body_jacobian(|a| self.fk_contact_to_contact(from, to, a), alpha)
    }

    /// Parses the plain-text robot description format:
    ///
    /// ```text
    /// # comment
    /// chain left
    /// joint hip_roll revolute axis=1,0,0 offset_xyz=0,0.135,-0.08 offset_rpy=0,0,0
    /// ...
    /// end_offset_xyz=0,0,-0.03
    /// end_offset_rpy=0,0,0
    /// chain right
    /// ...
    /// ```
    pub fn from_description(text: &str) -> Result<Self, KinematicsError> {
        parse_description(text).and_then(RobotModel::new)
    }

    /// The bundled demo biped: a 5-joint-per-leg serial stand-in for a
    /// human-scale walking robot.
    pub fn demo_biped() -> Self {
        RobotModel::from_description(DEMO_BIPED_DESCRIPTION).expect("demo description parses")
    }
}

fn reframe_pair_error(e: KinematicsError, from: ContactFrame, to: ContactFrame) -> KinematicsError {
    match e {
        KinematicsError::UnknownFrame(_) => KinematicsError::UnknownFramePair { from, to },
        other => other,
    }
}

/// Central-difference body Jacobian of a pose-valued map, column i given by
/// `(Log(F(a)^{-1} F(a + h e_i)) - Log(F(a)^{-1} F(a - h e_i))) / 2h`.
fn numeric_body_jacobian<F>(fk: F, alpha: &DVector<f64>) -> Result<DMatrix<f64>, KinematicsError>
where
    F: Fn(&DVector<f64>) -> Result<Pose, KinematicsError>,
{
    let n = alpha.len();
    let base_inv = fk(alpha)?.inverse();
    let mut jac = DMatrix::zeros(6, n);
    let mut work = alpha.clone();
    for i in 0..n {
        work[i] = alpha[i] + JACOBIAN_STEP;
        let plus = se3_log(&(base_inv * fk(&work)?))?;
        work[i] = alpha[i] - JACOBIAN_STEP;
        let minus = se3_log(&(base_inv * fk(&work)?))?;
        work[i] = alpha[i];
        let col = (plus.to_vector() - minus.to_vector()) / (2.0 * JACOBIAN_STEP);
        jac.column_mut(i).copy_from(&col);
    }
    Ok(jac)
}

/// Certifies the first-order right-sided noise factorization
/// `FK(a - n) ~ FK(a) Exp(-J(a) n)` by returning
/// `||Log(FK(a)^{-1} FK(a - n) Exp(+J(a) n))||`, which is second order in
/// `||n||`. Used by the test suites.
pub fn fk_noise_factorization_check(
    chain: &KinematicChain,
    alpha: &DVector<f64>,
    n_alpha: &DVector<f64>,
) -> Result<f64, KinematicsError> {
    let jac = chain.body_jacobian(alpha)?;
    let h_meas = chain.fk(alpha)?;
    let h_true = chain.fk(&(alpha - n_alpha))?;
    let correction = crate::manifold::se3_exp(&Twist::from_vector(&nalgebra::Vector6::from_iterator(
        (&jac * n_alpha).iter().cloned(),
    )));
    Ok(se3_log(&(h_meas.inverse() * h_true * correction))?.norm())
}

/// Residual of the forward-kinematic factor:
/// `r = Log(C_i^{-1} X_i H_BC(alpha~))`, zero when the contact pose is
/// exactly kinematically consistent with the base pose.
pub fn fk_factor_residual(
    robot: &RobotModel,
    x_i: &Pose,
    c_i: &Pose,
    reading: &EncoderReading,
    frame: ContactFrame,
) -> Result<Twist, KinematicsError> {
    let h_bc = robot.fk_base_to_contact(frame, &reading.alpha)?;
    Ok(se3_log(&(c_i.inverse() * *x_i * h_bc))?)
}

/// Covariance of the forward-kinematic factor,
/// `J_BC S_alpha J_BC^T + eps I`.
pub fn fk_factor_covariance(
    robot: &RobotModel,
    reading: &EncoderReading,
    frame: ContactFrame,
) -> Result<TangentCovariance, KinematicsError> {
    let jac = robot.body_jacobian_base_to_contact(frame, &reading.alpha)?;
    let cov = &jac * &reading.sigma_alpha * jac.transpose();
    let mut m = Matrix6::zeros();
    for r in 0..6 {
        for c in 0..6 {
            m[(r, c)] = cov[(r, c)];
        }
        m[(r, r)] += FK_COVARIANCE_REGULARIZATION;
    }
    Ok(TangentCovariance::from_symmetric_part(m))
}

fn parse_vec3(s: &str, line: usize) -> Result<Vector3<f64>, KinematicsError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(KinematicsError::Parse { line, msg: format!("expected 3 comma-separated numbers, got '{s}'") });
    }
    let mut v = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        v[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|_| KinematicsError::Parse { line, msg: format!("bad number '{p}'") })?;
    }
    Ok(v)
}

fn parse_description(text: &str) -> Result<Vec<(ContactFrame, KinematicChain)>, KinematicsError> {
    let mut chains: Vec<(ContactFrame, KinematicChain)> = Vec::new();
    let mut current: Option<(ContactFrame, KinematicChain)> = None;
    let mut pending_end_xyz: Option<Vector3<f64>> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix("chain ") {
            if current.is_some() {
                return Err(KinematicsError::Parse {
                    line: line_no,
                    msg: "previous chain not terminated by end_offset_xyz/rpy".into(),
                });
            }
            let name = name.trim();
            let frame = ContactFrame::from_label(name).ok_or_else(|| KinematicsError::Parse {
                line: line_no,
                msg: format!("unknown chain name '{name}' (expected left or right)"),
            })?;
            current = Some((
                frame,
                KinematicChain { name: name.to_string(), joints: Vec::new(), end_offset: Pose::identity() },
            ));
        } else if let Some(rest) = line.strip_prefix("joint ") {
            let (_, chain) = current.as_mut().ok_or_else(|| KinematicsError::Parse {
                line: line_no,
                msg: "joint outside of a chain block".into(),
            })?;
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            if tokens.len() != 5 {
                return Err(KinematicsError::Parse {
                    line: line_no,
                    msg: "expected: joint <name> <revolute|prismatic> axis=.. offset_xyz=.. offset_rpy=..".into(),
                });
            }
            let kind = match tokens[1] {
                "revolute" => JointKind::Revolute,
                "prismatic" => JointKind::Prismatic,
                other => {
                    return Err(KinematicsError::Parse { line: line_no, msg: format!("unknown joint kind '{other}'") })
                }
            };
            let mut axis = None;
            let mut xyz = None;
            let mut rpy = None;
            for tok in &tokens[2..] {
                if let Some(v) = tok.strip_prefix("axis=") {
                    axis = Some(parse_vec3(v, line_no)?);
                } else if let Some(v) = tok.strip_prefix("offset_xyz=") {
                    xyz = Some(parse_vec3(v, line_no)?);
                } else if let Some(v) = tok.strip_prefix("offset_rpy=") {
                    rpy = Some(parse_vec3(v, line_no)?);
                } else {
                    return Err(KinematicsError::Parse { line: line_no, msg: format!("unknown joint field '{tok}'") });
                }
            }
            let (axis, xyz, rpy) = match (axis, xyz, rpy) {
                (Some(a), Some(x), Some(r)) => (a, x, r),
                _ => {
                    return Err(KinematicsError::Parse {
                        line: line_no,
                        msg: "joint requires axis=, offset_xyz= and offset_rpy=".into(),
                    })
                }
            };
            let offset = Pose::new(Rotation::from_rpy(rpy[0], rpy[1], rpy[2]), xyz);
            let joint = JointModel::new(tokens[0], kind, axis, offset)
                .map_err(|_| KinematicsError::Parse { line: line_no, msg: "joint axis must be nonzero".into() })?;
            chain.joints.push(joint);
        } else if let Some(v) = line.strip_prefix("end_offset_xyz=") {
            if current.is_none() {
                return Err(KinematicsError::Parse { line: line_no, msg: "end_offset_xyz outside of a chain".into() });
            }
            pending_end_xyz = Some(parse_vec3(v, line_no)?);
        } else if let Some(v) = line.strip_prefix("end_offset_rpy=") {
            let (frame, mut chain) = current.take().ok_or_else(|| KinematicsError::Parse {
                line: line_no,
                msg: "end_offset_rpy outside of a chain".into(),
            })?;
            let xyz = pending_end_xyz.take().ok_or_else(|| KinematicsError::Parse {
                line: line_no,
                msg: "end_offset_rpy before end_offset_xyz".into(),
            })?;
            let rpy = parse_vec3(v, line_no)?;
            chain.end_offset = Pose::new(Rotation::from_rpy(rpy[0], rpy[1], rpy[2]), xyz);
            chains.push((frame, chain));
        } else {
            return Err(KinematicsError::Parse { line: line_no, msg: format!("unrecognized line '{line}'") });
        }
    }
    if current.is_some() {
        return Err(KinematicsError::Parse { line: text.lines().count(), msg: "unterminated chain block".into() });
    }
    Ok(chains)
}

/// The bundled demo biped description: five revolute joints per leg
/// (hip roll, hip pitch, knee pitch, ankle pitch, ankle roll).
pub const DEMO_BIPED_DESCRIPTION: &str = "\
# demo biped: 5-joint serial legs, sole frame at the foot
chain left
joint hip_roll    revolute axis=1,0,0 offset_xyz=0,0.135,-0.08 offset_rpy=0,0,0
joint hip_pitch   revolute axis=0,1,0 offset_xyz=0,0,-0.06     offset_rpy=0,0,0
joint knee_pitch  revolute axis=0,1,0 offset_xyz=0,0,-0.38     offset_rpy=0,0,0
joint ankle_pitch revolute axis=0,1,0 offset_xyz=0,0,-0.40     offset_rpy=0,0,0
joint ankle_roll  revolute axis=1,0,0 offset_xyz=0,0,-0.04     offset_rpy=0,0,0
end_offset_xyz=0,0,-0.03
end_offset_rpy=0,0,0
chain right
joint hip_roll    revolute axis=1,0,0 offset_xyz=0,-0.135,-0.08 offset_rpy=0,0,0
joint hip_pitch   revolute axis=0,1,0 offset_xyz=0,0,-0.06      offset_rpy=0,0,0
joint knee_pitch  revolute axis=0,1,0 offset_xyz=0,0,-0.38      offset_rpy=0,0,0
joint ankle_pitch revolute axis=0,1,0 offset_xyz=0,0,-0.40      offset_rpy=0,0,0
joint ankle_roll  revolute axis=1,0,0 offset_xyz=0,0,-0.04      offset_rpy=0,0,0
end_offset_xyz=0,0,-0.03
end_offset_rpy=0,0,0
";
