//! Damped-least-squares (Levenberg-Marquardt) polishing of IK seeds.

use nalgebra::{DMatrix, DVector, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::GoalSet;
use crate::kinematics::{jacobian_from_frames, link_transforms_unchecked, KinematicsError, Pose, RobotModel};

/// Damping beyond which the solver gives up on making progress.
const MAX_DAMPING: f64 = 1e9;
const MIN_DAMPING: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("goal set has no specified slot")]
    NoSpecifiedGoal,
    #[error("{got} goal slots for {expected} end effectors")]
    GoalCount { expected: usize, got: usize },
    #[error("seed list is empty")]
    NoSeeds,
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Initial damping; multiplied by 10 on a rejected step, divided by 10 on an accepted one.
    pub damping: f64,
    /// Position tolerance in meters.
    pub pos_tol: f64,
    /// Orientation tolerance in radians.
    pub ang_tol: f64,
    /// Largest joint change per iteration (rad or m).
    pub step_clamp: f64,
    pub pos_weight: f64,
    pub rot_weight: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            damping: 1e-3,
            pos_tol: 1e-4,
            ang_tol: 0.01,
            step_clamp: 0.5,
            pos_weight: 1.0,
            rot_weight: 0.5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.max_iters < 1 {
            return Err(RefineError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if ![
            self.damping,
            self.pos_tol,
            self.ang_tol,
            self.step_clamp,
            self.pos_weight,
            self.rot_weight,
        ]
        .into_iter()
        .all(positive)
        {
            return Err(RefineError::InvalidConfig(
                "damping, tolerances, step clamp and weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Where a seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Generated,
    Random,
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub q_final: Vec<f64>,
    pub success: bool,
    pub iters_used: usize,
    /// Per goal slot; `None` for unspecified slots.
    pub pos_err: Vec<Option<f64>>,
    pub ang_err: Vec<Option<f64>>,
    /// Norm of the weighted residual at `q_final`.
    pub residual: f64,
    pub source: SeedSource,
    pub diagnostic: Option<String>,
}

/// Per-slot position (m) and geodesic orientation (rad) errors at `q`.
pub fn goal_errors(model: &RobotModel, goals: &GoalSet, q: &[f64]) -> Result<Vec<Option<(f64, f64)>>, RefineError> {
    model.check_dim(q)?;
    check_goals(model, goals)?;
    let frames = link_transforms_unchecked(model, q);
    Ok(goals
        .slots
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            crate::denoiser::GoalSlot::Specified(goal) => {
                let pose = Pose::from_isometry(&frames[model.end_effectors()[i]]);
                Some(((pose.position - goal.position).norm(), pose.angle_to(goal)))
            }
            crate::denoiser::GoalSlot::Unspecified => None,
        })
        .collect())
}

fn check_goals(model: &RobotModel, goals: &GoalSet) -> Result<(), RefineError> {
    if goals.len() != model.n_ee() {
        return Err(RefineError::GoalCount {
            expected: model.n_ee(),
            got: goals.len(),
        });
    }
    if goals.n_specified() == 0 {
        return Err(RefineError::NoSpecifiedGoal);
    }
    Ok(())
}

struct Problem<'a> {
    model: &'a RobotModel,
    targets: Vec<(usize, &'a Pose)>,
    limits: Vec<Option<(f64, f64)>>,
    cfg: &'a RefineConfig,
}

struct Eval {
    r: DVector<f64>,
    errors: Vec<(f64, f64)>,
    frames: Vec<nalgebra::Isometry3<f64>>,
}

impl Problem<'_> {
    fn project(&self, q: &mut [f64]) {
        for (v, lim) in q.iter_mut().zip(&self.limits) {
            if let Some((lo, hi)) = lim {
                *v = v.clamp(*lo, *hi);
            }
        }
    }

    /// Weighted residual: per target, position error then world-frame
    /// rotation vector taking the current orientation onto the goal.
    fn eval(&self, q: &[f64]) -> Eval {
        let frames = link_transforms_unchecked(self.model, q);
        let mut r = DVector::zeros(6 * self.targets.len());
        let mut errors = Vec::with_capacity(self.targets.len());
        for (k, (ee, goal)) in self.targets.iter().enumerate() {
            let pose = Pose::from_isometry(&frames[self.model.end_effectors()[*ee]]);
            let dp = goal.position - pose.position;
            let rot: UnitQuaternion<f64> = goal.orientation() * pose.orientation().inverse();
            let dr = rot.scaled_axis();
            for i in 0..3 {
                r[6 * k + i] = self.cfg.pos_weight * dp[i];
                r[6 * k + 3 + i] = self.cfg.rot_weight * dr[i];
            }
            errors.push((dp.norm(), pose.angle_to(goal)));
        }
        Eval { r, errors, frames }
    }

    fn converged(&self, e: &Eval) -> bool {
        e.errors
            .iter()
            .all(|&(p, a)| p <= self.cfg.pos_tol && a <= self.cfg.ang_tol)
    }

    fn jacobian(&self, frames: &[nalgebra::Isometry3<f64>]) -> DMatrix<f64> {
        let dof = self.model.dof();
        let mut jac = DMatrix::zeros(6 * self.targets.len(), dof);
        for (k, (ee, _)) in self.targets.iter().enumerate() {
            let j = jacobian_from_frames(self.model, frames, *ee);
            for c in 0..dof {
                for i in 0..3 {
                    jac[(6 * k + i, c)] = self.cfg.pos_weight * j[(i, c)];
                    jac[(6 * k + 3 + i, c)] = self.cfg.rot_weight * j[(3 + i, c)];
                }
            }
        }
        jac
    }
}

/// `J^T (J J^T + lambda^2 I)^{-1} r`, or `None` if the system is not positive definite.
pub(crate) fn dls_step(jac: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let mut a = jac * jac.transpose();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda * lambda;
    }
    let chol = a.cholesky()?;
    let y = chol.solve(r);
    let dq = jac.transpose() * y;
    dq.iter().all(|v| v.is_finite()).then_some(dq)
}

/// Polishes one seed towards the specified goals.
pub fn refine(
    model: &RobotModel,
    goals: &GoalSet,
    seed_q: &[f64],
    cfg: &RefineConfig,
) -> Result<RefineResult, RefineError> {
    refine_tagged(model, goals, seed_q, cfg, SeedSource::Provided)
}

pub fn refine_tagged(
    model: &RobotModel,
    goals: &GoalSet,
    seed_q: &[f64],
    cfg: &RefineConfig,
    source: SeedSource,
) -> Result<RefineResult, RefineError> {
    cfg.validate()?;
    model.check_dim(seed_q)?;
    check_goals(model, goals)?;
    let problem = Problem {
        model,
        targets: goals.specified().collect(),
        limits: model.actuated_joints().map(|j| j.limits).collect(),
        cfg,
    };
    let mut q = seed_q.to_vec();
    problem.project(&mut q);
    let mut cur = problem.eval(&q);
    let mut lambda = cfg.damping;
    let mut iters = 0;
    let mut diagnostic = None;
    let mut success = problem.converged(&cur);
    while !success && iters < cfg.max_iters {
        iters += 1;
        let jac = problem.jacobian(&cur.frames);
        let Some(mut dq) = dls_step(&jac, &cur.r, lambda) else {
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                diagnostic = Some("normal equations singular beyond damping recovery".into());
                break;
            }
            continue;
        };
        let biggest = dq.amax();
        if biggest > cfg.step_clamp {
            dq *= cfg.step_clamp / biggest;
        }
        let mut trial: Vec<f64> = q.iter().zip(dq.iter()).map(|(a, b)| a + b).collect();
        problem.project(&mut trial);
        let next = problem.eval(&trial);
        if next.r.norm() < cur.r.norm() {
            q = trial;
            cur = next;
            lambda = (lambda / 10.0).max(MIN_DAMPING);
            success = problem.converged(&cur);
        } else {
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                diagnostic = Some("no descent direction: damping limit reached".into());
                break;
            }
        }
    }
    if !success && diagnostic.is_none() {
        diagnostic = Some(format!("tolerance not reached in {} iterations", cfg.max_iters));
    }
    let mut errs = cur.errors.iter();
    let per_slot: Vec<Option<(f64, f64)>> = goals
        .slots
        .iter()
        .map(|s| match s {
            crate::denoiser::GoalSlot::Specified(_) => errs.next().copied(),
            crate::denoiser::GoalSlot::Unspecified => None,
        })
        .collect();
    Ok(RefineResult {
        pos_err: per_slot.iter().map(|e| e.map(|v| v.0)).collect(),
        ang_err: per_slot.iter().map(|e| e.map(|v| v.1)).collect(),
        residual: cur.r.norm(),
        q_final: q,
        success,
        iters_used: iters,
        source,
        diagnostic,
    })
}

/// Refines every seed; `best` is the lowest-residual success, else the lowest residual overall.
pub fn solve_batch(
    model: &RobotModel,
    goals: &GoalSet,
    seeds: &[Vec<f64>],
    cfg: &RefineConfig,
    source: SeedSource,
) -> Result<(RefineResult, Vec<RefineResult>), RefineError> {
    if seeds.is_empty() {
        return Err(RefineError::NoSeeds);
    }
    let all = seeds
        .par_iter()
        .map(|s| refine_tagged(model, goals, s, cfg, source))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = |only_success: bool| {
        all.iter()
            .filter(|r| !only_success || r.success)
            .min_by(|a, b| a.residual.total_cmp(&b.residual))
            .cloned()
    };
    let best = pick(true).or_else(|| pick(false)).expect("at least one result");
    Ok((best, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huge_damping_gives_tiny_step() {
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let r = DVector::from_vec(vec![0.3, -0.2]);
        let small = dls_step(&jac, &r, 1e-3).unwrap();
        let big = dls_step(&jac, &r, 1e6).unwrap();
        assert!(big.norm() < 1e-9 * small.norm().max(1.0) * 1e3);
        // undamped step solves the square system exactly
        let exact = jac.clone().lu().solve(&r).unwrap();
        assert!((dls_step(&jac, &r, 1e-9).unwrap() - exact).norm() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        let bad = RefineConfig {
            max_iters: 0,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefineConfig {
            pos_tol: 0.0,
            ..RefineConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
