use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};

/// Rigid pose: position in meters plus a unit quaternion kept in the `w >= 0` half-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonical(orientation),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    /// Builds a pose from a translation and fixed-axis roll/pitch/yaw angles.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Vector3::from(xyz),
            UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
        )
    }

    /// Accepts a raw `(w, x, y, z)` quaternion and normalizes it.
    pub fn from_wxyz(position: Vector3<f64>, wxyz: [f64; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self::new(position, UnitQuaternion::from_quaternion(q))
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    /// `(w, x, y, z)` of the canonical quaternion.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Feature layout `[x, y, z, w, qx, qy, qz]`.
    pub fn to_features(&self) -> [f64; 7] {
        let [w, x, y, z] = self.wxyz();
        [self.position.x, self.position.y, self.position.z, w, x, y, z]
    }

    pub fn from_features(f: &[f64]) -> Self {
        Self::from_wxyz(Vector3::new(f[0], f[1], f[2]), [f[3], f[4], f[5], f[6]])
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.translation.vector, iso.rotation)
    }

    /// Geodesic angle to another orientation in radians, in `[0, pi]`.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        quat_geodesic(&self.orientation, &other.orientation)
    }
}

/// `2 acos(|<a, b>|)`, insensitive to the sign of either operand.
pub fn quat_geodesic(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let dot = a.quaternion().dot(b.quaternion()).abs().min(1.0);
    2.0 * dot.acos()
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    // renormalize to keep |q| = 1 tight after long transform chains
    let mut raw = *q.quaternion();
    let n = raw.norm();
    raw /= n;
    if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_unchecked(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn canonical_sign_and_norm() {
        let p = Pose::from_wxyz(Vector3::zeros(), [-0.5, 0.5, -0.5, 0.5]);
        let [w, x, y, z] = p.wxyz();
        assert!(w >= 0.0);
        assert!(((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(p.wxyz(), [0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn features_round_trip() {
        let p = Pose::from_xyz_rpy([0.1, -0.2, 0.3], [0.4, -0.5, 2.9]);
        let q = Pose::from_features(&p.to_features());
        assert!((p.position - q.position).norm() < 1e-15);
        assert!(p.angle_to(&q) < 1e-7);
    }

    #[test]
    fn geodesic_is_sign_insensitive() {
        let a = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3);
        let b = UnitQuaternion::from_euler_angles(0.0, 0.0, -0.4);
        let neg = UnitQuaternion::new_unchecked(-*b.quaternion());
        assert!((quat_geodesic(&a, &b) - 0.7).abs() < 1e-12);
        assert!((quat_geodesic(&a, &neg) - 0.7).abs() < 1e-12);
        let half = UnitQuaternion::from_euler_angles(0.0, 0.0, PI);
        assert!((quat_geodesic(&UnitQuaternion::identity(), &half) - PI).abs() < 1e-12);
    }
}
