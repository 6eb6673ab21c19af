use nalgebra::{DMatrix, Isometry3, Matrix6xX, Translation3, UnitQuaternion, Vector3};

use super::{JointKind, KinematicsError, Pose, RobotModel};

/// World frame of every link for configuration `q`.
pub fn link_transforms(model: &RobotModel, q: &[f64]) -> Result<Vec<Isometry3<f64>>, KinematicsError> {
    model.check_dim(q)?;
    Ok(link_transforms_unchecked(model, q))
}

pub(crate) fn link_transforms_unchecked(model: &RobotModel, q: &[f64]) -> Vec<Isometry3<f64>> {
    let mut frames = vec![Isometry3::identity(); model.links.len()];
    for &ji in &model.joint_order {
        let joint = &model.joints[ji];
        let base = frames[joint.parent_link] * model.origins[ji];
        let motion = match (joint.kind, model.actuated_index[ji]) {
            (JointKind::Revolute, Some(k)) => Isometry3::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_scaled_axis(joint.axis * q[k]),
            ),
            (JointKind::Prismatic, Some(k)) => {
                Isometry3::from_parts(Translation3::from(joint.axis * q[k]), UnitQuaternion::identity())
            }
            _ => Isometry3::identity(),
        };
        frames[joint.child_link] = base * motion;
    }
    frames
}

/// World pose of each end effector, in end-effector order.
pub fn forward_kinematics(model: &RobotModel, q: &[f64]) -> Result<Vec<Pose>, KinematicsError> {
    let frames = link_transforms(model, q)?;
    Ok(model
        .end_effectors
        .iter()
        .map(|&l| Pose::from_isometry(&frames[l]))
        .collect())
}

/// Geometric world-frame Jacobian of end effector `ee`: rows 0..3 linear, 3..6 angular.
pub fn jacobian(model: &RobotModel, q: &[f64], ee: usize) -> Result<Matrix6xX<f64>, KinematicsError> {
    if ee >= model.n_ee() {
        return Err(KinematicsError::EndEffectorIndex {
            index: ee,
            n_ee: model.n_ee(),
        });
    }
    let frames = link_transforms(model, q)?;
    Ok(jacobian_from_frames(model, &frames, ee))
}

pub(crate) fn jacobian_from_frames(model: &RobotModel, frames: &[Isometry3<f64>], ee: usize) -> Matrix6xX<f64> {
    let mut jac = Matrix6xX::zeros(model.dof);
    let p_ee = frames[model.end_effectors[ee]].translation.vector;
    for &ji in &model.ee_paths[ee] {
        let joint = &model.joints[ji];
        let Some(k) = model.actuated_index[ji] else {
            continue;
        };
        let frame = frames[joint.parent_link] * model.origins[ji];
        let axis = frame.rotation * joint.axis;
        match joint.kind {
            JointKind::Revolute => {
                let lin = axis.cross(&(p_ee - frame.translation.vector));
                jac.fixed_view_mut::<3, 1>(0, k).copy_from(&lin);
                jac.fixed_view_mut::<3, 1>(3, k).copy_from(&axis);
            }
            JointKind::Prismatic => {
                jac.fixed_view_mut::<3, 1>(0, k).copy_from(&axis);
            }
            JointKind::Fixed => {}
        }
    }
    jac
}

/// `sqrt(det(J J^T))` for one end effector.
///
/// Chains with fewer than six actuated joints on the path use the position
/// rows only; when every revolute axis on the path is parallel (and prismatic
/// axes lie in the orthogonal plane) the position rows are further reduced to
/// that plane. The Gram determinant is taken on the short side of the
/// resulting matrix, i.e. the product of its singular values.
pub fn manipulability(model: &RobotModel, q: &[f64], ee: usize) -> Result<f64, KinematicsError> {
    if ee >= model.n_ee() {
        return Err(KinematicsError::EndEffectorIndex {
            index: ee,
            n_ee: model.n_ee(),
        });
    }
    let frames = link_transforms(model, q)?;
    Ok(manipulability_from_frames(model, &frames, ee))
}

pub(crate) fn manipulability_from_frames(model: &RobotModel, frames: &[Isometry3<f64>], ee: usize) -> f64 {
    let jac = jacobian_from_frames(model, frames, ee);
    let cols: Vec<usize> = model.ee_paths[ee]
        .iter()
        .filter_map(|&j| model.actuated_index[j])
        .collect();
    if cols.is_empty() {
        return 0.0;
    }
    let reduced: DMatrix<f64> = if cols.len() >= 6 {
        DMatrix::from_fn(6, cols.len(), |r, c| jac[(r, cols[c])])
    } else {
        let pos = DMatrix::from_fn(3, cols.len(), |r, c| jac[(r, cols[c])]);
        match motion_plane_normal(model, frames, ee) {
            Some(n) => {
                let (e1, e2) = plane_basis(&n);
                let basis = DMatrix::from_row_slice(2, 3, &[e1.x, e1.y, e1.z, e2.x, e2.y, e2.z]);
                basis * pos
            }
            None => pos,
        }
    };
    let gram = if reduced.nrows() <= reduced.ncols() {
        &reduced * reduced.transpose()
    } else {
        reduced.transpose() * &reduced
    };
    gram.determinant().max(0.0).sqrt()
}

/// Common revolute axis of a planar chain, if the path is planar.
fn motion_plane_normal(model: &RobotModel, frames: &[Isometry3<f64>], ee: usize) -> Option<Vector3<f64>> {
    let mut normal: Option<Vector3<f64>> = None;
    let mut prismatic = Vec::new();
    for &ji in &model.ee_paths[ee] {
        let joint = &model.joints[ji];
        let axis = (frames[joint.parent_link] * model.origins[ji]).rotation * joint.axis;
        match joint.kind {
            JointKind::Revolute => match normal {
                None => normal = Some(axis),
                Some(n) if n.cross(&axis).norm() < 1e-9 => {}
                Some(_) => return None,
            },
            JointKind::Prismatic => prismatic.push(axis),
            JointKind::Fixed => {}
        }
    }
    let n = normal?;
    prismatic.iter().all(|a| a.dot(&n).abs() < 1e-9).then_some(n)
}

fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = n.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - n * n.dot(&helper)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Sum of per-end-effector manipulability.
pub fn total_manipulability(model: &RobotModel, q: &[f64]) -> Result<f64, KinematicsError> {
    let frames = link_transforms(model, q)?;
    Ok((0..model.n_ee())
        .map(|ee| manipulability_from_frames(model, &frames, ee))
        .sum())
}
