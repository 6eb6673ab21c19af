use nalgebra::Isometry3;

use super::fk::link_transforms_unchecked;
use super::{KinematicsError, RobotModel};

/// True iff a sphere pair on two non-adjacent links overlaps.
pub fn self_collides(model: &RobotModel, q: &[f64]) -> Result<bool, KinematicsError> {
    model.check_dim(q)?;
    if model.collision_pairs.is_empty() {
        return Ok(false);
    }
    let frames = link_transforms_unchecked(model, q);
    Ok(collides_with_frames(model, &frames))
}

pub(crate) fn collides_with_frames(model: &RobotModel, frames: &[Isometry3<f64>]) -> bool {
    model.collision_pairs.iter().any(|&(la, sa, lb, sb)| {
        let a = &model.links[la].spheres[sa];
        let b = &model.links[lb].spheres[sb];
        let ca = frames[la] * nalgebra::Point3::from(a.center);
        let cb = frames[lb] * nalgebra::Point3::from(b.center);
        let reach = a.radius + b.radius;
        (ca - cb).norm_squared() < reach * reach
    })
}
