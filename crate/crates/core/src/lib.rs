//! Factor-graph smoothing for legged-robot state estimation.
//!
//! The crate provides the building blocks of a contact-aided visual-inertial
//! smoother for bipeds:
//!
//! * [`manifold`]: SO(3)/SE(3) group operations, tangent maps, adjoints and
//!   the retraction used for on-manifold optimization.
//! * [`kinematics`]: kinematic chains with revolute/prismatic joints, body
//!   manipulator Jacobians, and the forward-kinematic factor.
//! * [`imu`]: standard on-manifold IMU preintegration between keyframes.
//! * [`contact`]: hybrid preintegration of contact measurements across an
//!   arbitrary number of contact switches, plus the point-contact variant.
//! * [`graph`]: the factor-graph data model and a batch Levenberg-Marquardt
//!   MAP solver with marginal covariance recovery.
//! * [`sim`]: a deterministic bipedal-walk scenario generator.
//! * [`io`]: JSONL dataset and CSV result serialization.
//! * [`pipeline`]: dataset-to-graph assembly for the odometry variants.
//! * [`eval`]: trajectory error metrics (ATE, RPE, error CDFs).

pub mod contact;
pub mod eval;
pub mod graph;
pub mod imu;
pub mod io;
pub mod kinematics;
pub mod manifold;
pub mod pipeline;
pub mod sim;

pub use manifold::{Pose, Rotation, TangentCovariance, Twist};
