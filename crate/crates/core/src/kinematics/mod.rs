//! Kinematic trees: description parsing, forward kinematics, Jacobians,
//! manipulability, sphere-based self-collision and configuration sampling.

mod collision;
mod fk;
mod model;
mod pose;

pub use collision::self_collides;
pub use fk::{forward_kinematics, jacobian, link_transforms, manipulability, total_manipulability};
pub use model::{parse_robot, sample_config, JointKind, JointSpec, Link, RobotModel, Sphere};
pub use pose::{quat_geodesic, Pose};

pub(crate) use collision::collides_with_frames;
pub(crate) use fk::{jacobian_from_frames, link_transforms_unchecked};
pub(crate) use model::sample_within;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("robot description parse error: {0}")]
    Parse(String),
    #[error("{entity}: {reason}")]
    Schema { entity: String, reason: String },
    #[error("cycle in kinematic tree at joint `{joint}`")]
    Cycle { joint: String },
    #[error("{entity} references unknown link `{link}`")]
    UnknownLink { entity: String, link: String },
    #[error("joint `{joint}` axis is not unit length (norm {norm})")]
    NonUnitAxis { joint: String, norm: f64 },
    #[error("joint `{joint}` has invalid limits [{lo}, {hi}]")]
    InvalidLimits { joint: String, lo: f64, hi: f64 },
    #[error("joint `{joint}` is unbounded; every actuated joint needs limits")]
    Unbounded { joint: String },
    #[error("configuration has {got} entries, model has {expected} dof")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("end effector index {index} out of range (n_ee = {n_ee})")]
    EndEffectorIndex { index: usize, n_ee: usize },
}
