//! Objective gradients that shift each reverse-diffusion mean.
//!
//! Member gradients are computed in joint space and converted to the
//! normalized coordinates the sampler works in by the diagonal normalization
//! Jacobian `dq/dq_n = (hi - lo) / 2`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::datagen::NormStats;
use crate::kinematics::{total_manipulability, KinematicsError, RobotModel};

/// Step of the central differences used for the manipulability gradient.
pub const MANIP_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("objective weight must be finite and non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite gradient from {objective} objective")]
    NonFinite { objective: &'static str },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Joint-space gradient callback: `q -> d log p / dq`. Must be reentrant.
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum ObjectiveKind {
    /// Stay close to a prior configuration: `log p = -|q - q_prior|^2`.
    WarmStart {
        q_prior: Vec<f64>,
    },
    /// Maximize summed per-end-effector manipulability.
    Manipulability,
    Custom {
        name: String,
        gradient: GradientFn,
    },
}

impl fmt::Debug for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WarmStart { q_prior } => f.debug_struct("WarmStart").field("q_prior", q_prior).finish(),
            Self::Manipulability => f.write_str("Manipulability"),
            Self::Custom { name, .. } => f.debug_struct("Custom").field("name", name).finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub weight: f64,
}

impl Objective {
    pub fn warm_start(q_prior: Vec<f64>, weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::WarmStart { q_prior },
            weight,
        }
    }

    pub fn manipulability(weight: f64) -> Self {
        Self {
            kind: ObjectiveKind::Manipulability,
            weight,
        }
    }

    pub fn custom(name: impl Into<String>, weight: f64, gradient: GradientFn) -> Self {
        Self {
            kind: ObjectiveKind::Custom {
                name: name.into(),
                gradient,
            },
            weight,
        }
    }

    /// Unweighted joint-space gradient at `q`.
    pub fn joint_gradient(&self, model: &RobotModel, q: &[f64]) -> Result<Vec<f64>, GuidanceError> {
        let (g, label) = match &self.kind {
            ObjectiveKind::WarmStart { q_prior } => {
                check_len(model.dof(), q_prior.len())?;
                (warm_start_grad(q, q_prior), "warm-start")
            }
            ObjectiveKind::Manipulability => (manipulability_grad(model, q)?, "manipulability"),
            ObjectiveKind::Custom { gradient, .. } => {
                let g = gradient(q);
                check_len(model.dof(), g.len())?;
                (g, "custom")
            }
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(GuidanceError::NonFinite { objective: label });
        }
        Ok(g)
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), GuidanceError> {
    if expected != got {
        return Err(GuidanceError::Dimension { expected, got });
    }
    Ok(())
}

/// `-2 (mu - q_prior)`, in joint space.
pub fn warm_start_grad(mu: &[f64], q_prior: &[f64]) -> Vec<f64> {
    mu.iter().zip(q_prior).map(|(m, p)| -2.0 * (m - p)).collect()
}

/// Gradient of the summed manipulability by central differences.
pub fn manipulability_grad(model: &RobotModel, mu: &[f64]) -> Result<Vec<f64>, GuidanceError> {
    model.check_dim(mu)?;
    let mut q = mu.to_vec();
    let mut g = Vec::with_capacity(mu.len());
    for j in 0..mu.len() {
        q[j] = mu[j] + MANIP_FD_STEP;
        let plus = total_manipulability(model, &q)?;
        q[j] = mu[j] - MANIP_FD_STEP;
        let minus = total_manipulability(model, &q)?;
        q[j] = mu[j];
        let d = (plus - minus) / (2.0 * MANIP_FD_STEP);
        if !d.is_finite() {
            return Err(GuidanceError::NonFinite {
                objective: "manipulability",
            });
        }
        g.push(d);
    }
    Ok(g)
}

/// Weighted sum of objective gradients at normalized mean `mu_n`, returned in
/// normalized coordinates. An empty list gives the zero vector.
pub fn combine(
    objectives: &[Objective],
    model: &RobotModel,
    stats: &NormStats,
    mu_n: &[f64],
) -> Result<Vec<f64>, GuidanceError> {
    check_len(stats.dof(), mu_n.len())?;
    let mut g = vec![0.0; mu_n.len()];
    if objectives.is_empty() {
        return Ok(g);
    }
    let q = stats.denormalize_q(mu_n);
    let half = stats.q_half_range();
    for obj in objectives {
        if !(obj.weight >= 0.0 && obj.weight.is_finite()) {
            return Err(GuidanceError::NegativeWeight(obj.weight));
        }
        let gq = obj.joint_gradient(model, &q)?;
        for ((acc, v), h) in g.iter_mut().zip(gq).zip(&half) {
            *acc += obj.weight * v * h;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::kinematics::parse_robot;

    fn two_r() -> RobotModel {
        parse_robot(&fixtures::planar_chain(2, 1.0, 3.0)).unwrap()
    }

    fn stats(model: &RobotModel) -> NormStats {
        let l = model.limits().unwrap();
        NormStats {
            q_lo: l.iter().map(|v| v.0).collect(),
            q_hi: l.iter().map(|v| v.1).collect(),
            pos_scale: 1.0,
            pos_center: [0.0; 3],
        }
    }

    #[test]
    fn warm_start_examples() {
        assert_eq!(warm_start_grad(&[0.3, -0.2], &[0.3, -0.2]), vec![0.0, 0.0]);
        assert_eq!(
            warm_start_grad(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]),
            vec![-2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn combine_converts_to_normalized_space() {
        let m = two_r();
        let s = stats(&m);
        let mu_n = [0.1, 0.2];
        let q = s.denormalize_q(&mu_n);
        let prior = vec![0.0, 0.0];
        let g = combine(&[Objective::warm_start(prior.clone(), 1.0)], &m, &s, &mu_n).unwrap();
        let gq = warm_start_grad(&q, &prior);
        for j in 0..2 {
            assert!((g[j] - gq[j] * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_negative_weight_and_bad_prior() {
        let m = two_r();
        let s = stats(&m);
        assert!(matches!(
            combine(&[Objective::manipulability(-1.0)], &m, &s, &[0.0, 0.0]),
            Err(GuidanceError::NegativeWeight(_))
        ));
        assert!(matches!(
            combine(&[Objective::warm_start(vec![0.0], 1.0)], &m, &s, &[0.0, 0.0]),
            Err(GuidanceError::Dimension { .. })
        ));
    }

    #[test]
    fn custom_nan_is_reported() {
        let m = two_r();
        let s = stats(&m);
        let bad = Objective::custom("nan", 1.0, Arc::new(|q: &[f64]| vec![f64::NAN; q.len()]));
        assert!(matches!(
            combine(&[bad], &m, &s, &[0.0, 0.0]),
            Err(GuidanceError::NonFinite { objective: "custom" })
        ));
    }
}
