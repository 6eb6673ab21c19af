//! Metrics and the desk-scale experiment harness.
//!
//! Every scenario draws its goals from streams disjoint from dataset
//! generation, runs goals in parallel with order-preserving collection and
//! aggregates from the full per-goal data, so a report depends only on the
//! checkpoints, robots and config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::denoiser::{checkpoint_bytes, DenoiserParams, GoalSet, GoalSlot};
use crate::diffusion::{sample, DiffusionError, NoiseSchedule, SampleConfig};
use crate::guidance::Objective;
use crate::kinematics::{
    forward_kinematics, sample_config, self_collides, total_manipulability, JointKind, KinematicsError, Pose,
    RobotModel,
};
use crate::refiner::{solve_batch, RefineConfig, RefineError, RefineResult, SeedSource};

const GOAL_STREAM: u64 = 0x6f61_6c00;
const MASK_STREAM: u64 = 0x6d61_736b;
const SEED_STREAM: u64 = 0x7365_6564;
/// Draws allowed when looking for one collision-free test configuration.
const MAX_GOAL_DRAWS: usize = 100_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate baseline: reference solutions have zero spread")]
    DegenerateBaseline,
    #[error("need at least two solutions per list, got {0}")]
    TooFewSolutions(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("scenario {scenario} needs {needed} model(s), got {got}")]
    MissingModel {
        scenario: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("no collision-free configuration found in {0} draws")]
    NoFreeConfiguration(usize),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-slot `(pos_mm, ang_deg)`, `None` for unspecified slots.
pub fn pose_errors(model: &RobotModel, q: &[f64], goals: &GoalSet) -> Result<Vec<Option<(f64, f64)>>, EvalError> {
    if goals.len() != model.n_ee() {
        return Err(EvalError::Dimension {
            expected: model.n_ee(),
            got: goals.len(),
        });
    }
    let poses = forward_kinematics(model, q)?;
    Ok(goals
        .slots
        .iter()
        .zip(&poses)
        .map(|(slot, actual)| match slot {
            GoalSlot::Specified(goal) => Some((
                (actual.position - goal.position).norm() * 1000.0,
                actual.angle_to(goal).to_degrees(),
            )),
            GoalSlot::Unspecified => None,
        })
        .collect())
}

/// Mean pairwise L2 distance over all unordered pairs.
pub fn mean_pairwise_distance(sols: &[Vec<f64>]) -> Result<f64, EvalError> {
    if sols.len() < 2 {
        return Err(EvalError::TooFewSolutions(sols.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sols.len() {
        for j in i + 1..sols.len() {
            if sols[i].len() != sols[j].len() {
                return Err(EvalError::Dimension {
                    expected: sols[i].len(),
                    got: sols[j].len(),
                });
            }
            total += sols[i]
                .iter()
                .zip(&sols[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Spread of `a` relative to spread of `b`; above 1 means `a` is more diverse.
pub fn diversity_score(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    let num = mean_pairwise_distance(a)?;
    let den = mean_pairwise_distance(b)?;
    if den <= 0.0 {
        return Err(EvalError::DegenerateBaseline);
    }
    Ok(num / den)
}

/// Mean of `|q_j - prior_j| / (hi_j - lo_j)` over solutions and joints, in percent.
pub fn joint_difference(sols: &[Vec<f64>], q_prior: &[f64], limits: &[(f64, f64)]) -> Result<f64, EvalError> {
    if q_prior.len() != limits.len() {
        return Err(EvalError::Dimension {
            expected: limits.len(),
            got: q_prior.len(),
        });
    }
    if sols.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in sols {
        if q.len() != limits.len() {
            return Err(EvalError::Dimension {
                expected: limits.len(),
                got: q.len(),
            });
        }
        for ((v, p), (lo, hi)) in q.iter().zip(q_prior).zip(limits) {
            total += (v - p).abs() / (hi - lo);
        }
    }
    Ok(total / (sols.len() * limits.len()) as f64 * 100.0)
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Task1Generation,
    Task2Seeding,
    Task4Warm,
    Task4Manip,
    Task5Marginal,
    Task6Scaling,
    AppendixUnreachable,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Task1Generation,
        Scenario::Task2Seeding,
        Scenario::Task4Warm,
        Scenario::Task4Manip,
        Scenario::Task5Marginal,
        Scenario::Task6Scaling,
        Scenario::AppendixUnreachable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Task1Generation => "task1_generation",
            Scenario::Task2Seeding => "task2_seeding",
            Scenario::Task4Warm => "task4_warm",
            Scenario::Task4Manip => "task4_manip",
            Scenario::Task5Marginal => "task5_marginal",
            Scenario::Task6Scaling => "task6_scaling",
            Scenario::AppendixUnreachable => "appendix_unreachable",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenario: Scenario,
    pub n_goals: usize,
    pub samples_per_goal: usize,
    pub seed: u64,
    pub steps_used: usize,
    pub stochastic: bool,
    pub refine: RefineConfig,
    pub warm_weight: f64,
    /// Largest per-joint offset (rad or m) between the warm-start prior and the configuration behind the goal.
    pub warm_offset: f64,
    pub manip_weight: f64,
    /// Sweep positions inside the reach boundary, then beyond it.
    pub sweep_inside: usize,
    pub sweep_outside: usize,
    /// Distance between consecutive sweep goals in meters.
    pub sweep_step: f64,
    /// Worker threads across goals; results do not depend on it.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Task1Generation,
            n_goals: 1000,
            samples_per_goal: 32,
            seed: 0,
            steps_used: 25,
            stochastic: true,
            refine: RefineConfig::default(),
            warm_weight: 1.0,
            warm_offset: 0.1,
            manip_weight: 20.0,
            sweep_inside: 2,
            sweep_outside: 6,
            sweep_step: 0.05,
            workers: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_goals == 0 {
            return Err(EvalError::InvalidConfig("n_goals must be at least 1".into()));
        }
        if self.samples_per_goal < 2 {
            return Err(EvalError::InvalidConfig("samples_per_goal must be at least 2".into()));
        }
        for (name, v) in [
            ("warm_weight", self.warm_weight),
            ("warm_offset", self.warm_offset),
            ("manip_weight", self.manip_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EvalError::InvalidConfig(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if !(self.sweep_step > 0.0 && self.sweep_step.is_finite()) {
            return Err(EvalError::InvalidConfig("sweep_step must be positive".into()));
        }
        self.refine.validate()?;
        Ok(())
    }
}

/// A trained model bound to its robot.
#[derive(Debug, Clone, Copy)]
pub struct BenchModel<'a> {
    pub label: &'a str,
    pub robot: &'a RobotModel,
    pub params: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
}

/// One report row. Errors are aggregated over every (solution, specified slot) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label: String,
    pub robot: String,
    pub n_goals: usize,
    pub n_solutions: usize,
    pub collision_rate: f64,
    pub pos_mm_mean: f64,
    pub pos_mm_std: f64,
    pub ang_deg_mean: f64,
    pub ang_deg_std: f64,
    /// Mean position error per end effector, `None` when that slot was never specified.
    pub pos_mm_ee: Vec<Option<f64>>,
    pub ang_deg_ee: Vec<Option<f64>>,
    pub diversity: Option<f64>,
    pub success_rate: Option<f64>,
    pub iters_mean: Option<f64>,
    pub iters_std: Option<f64>,
    pub joint_diff_pct: Option<f64>,
    pub manipulability_mean: Option<f64>,
    pub manip_improvement_pct: Option<f64>,
    pub offset_m: Option<f64>,
    pub shortfall_mm: Option<f64>,
}

/// Solutions behind one report row, kept for recomputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSolutions {
    pub label: String,
    /// Per goal, the solutions produced for it.
    pub per_goal: Vec<Vec<Vec<f64>>>,
    pub collisions: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Scenario,
    pub config: BenchConfig,
    /// Hex SHA-256 over checkpoints, robot descriptions and the config.
    pub input_hash: String,
    pub records: Vec<MetricsRecord>,
    pub solutions: Vec<StoredSolutions>,
}

impl Report {
    pub fn record(&self, label: &str) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.label == label)
    }
}

pub fn input_hash(models: &[BenchModel<'_>], cfg: &BenchConfig) -> String {
    let mut h = Sha256::new();
    for m in models {
        h.update(m.label.as_bytes());
        h.update(m.robot.source_hash());
        h.update(checkpoint_bytes(m.params));
        for b in &m.schedule.beta {
            h.update(b.to_le_bytes());
        }
    }
    let echo = BenchConfig {
        workers: 0,
        ..cfg.clone()
    };
    h.update(serde_json::to_vec(&echo).expect("config serializes"));
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs `cfg.scenario`. Task 6 uses one row per model; every other scenario uses `models[0]`.
pub fn run_benchmark(cfg: &BenchConfig, models: &[BenchModel<'_>]) -> Result<Report, EvalError> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(EvalError::MissingModel {
            scenario: cfg.scenario.name(),
            needed: 1,
            got: 0,
        });
    }
    for m in models {
        m.params.check_model(m.robot).map_err(DiffusionError::from)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
    let (records, solutions) = pool.install(|| match cfg.scenario {
        Scenario::Task1Generation => task1(cfg, &models[0]),
        Scenario::Task2Seeding => task2(cfg, &models[0]),
        Scenario::Task4Warm => task4_warm(cfg, &models[0]),
        Scenario::Task4Manip => task4_manip(cfg, &models[0]),
        Scenario::Task5Marginal => task5(cfg, &models[0]),
        Scenario::Task6Scaling => task6(cfg, models),
        Scenario::AppendixUnreachable => unreachable_sweep(cfg, &models[0]),
    })?;
    Ok(Report {
        scenario: cfg.scenario,
        config: cfg.clone(),
        input_hash: input_hash(models, cfg),
        records,
        solutions,
    })
}

type Rows = (Vec<MetricsRecord>, Vec<StoredSolutions>);

/// Collision-free test configurations and their poses.
pub fn test_goals(model: &RobotModel, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<Pose>)>, EvalError> {
    let mut rng = stream(seed, GOAL_STREAM);
    (0..n)
        .map(|_| {
            let q = free_config(model, &mut rng)?;
            let poses = forward_kinematics(model, &q)?;
            Ok((q, poses))
        })
        .collect()
}

fn free_config(model: &RobotModel, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EvalError> {
    for _ in 0..MAX_GOAL_DRAWS {
        let q = sample_config(model, rng)?;
        if !self_collides(model, &q)? {
            return Ok(q);
        }
    }
    Err(EvalError::NoFreeConfiguration(MAX_GOAL_DRAWS))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sampler seed for goal `i`, distinct per goal.
fn goal_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn generate(
    cfg: &BenchConfig,
    m: &BenchModel<'_>,
    goals: &GoalSet,
    goal_index: usize,
    objectives: &[Objective],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let sc = SampleConfig {
        n_samples: cfg.samples_per_goal,
        steps_used: cfg.steps_used,
        stochastic: cfg.stochastic,
        seed: goal_seed(cfg.seed, goal_index),
        workers: 1,
    };
    Ok(sample(m.params, m.robot, goals, m.schedule, &sc, objectives)?.samples)
}

fn random_seeds(model: &RobotModel, n: usize, seed: u64, goal_index: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut rng = stream(goal_seed(seed, goal_index), SEED_STREAM);
    (0..n).map(|_| Ok(sample_config(model, &mut rng)?)).collect()
}

/// Per-goal raw data from which a row is aggregated.
#[derive(Default)]
struct GoalData {
    sols: Vec<Vec<f64>>,
    errors: Vec<Vec<Option<(f64, f64)>>>,
    collisions: Vec<bool>,
}

fn goal_data(model: &RobotModel, goals: &GoalSet, sols: Vec<Vec<f64>>) -> Result<GoalData, EvalError> {
    let mut errors = Vec::with_capacity(sols.len());
    let mut collisions = Vec::with_capacity(sols.len());
    for q in &sols {
        errors.push(pose_errors(model, q, goals)?);
        collisions.push(self_collides(model, q)?);
    }
    Ok(GoalData {
        sols,
        errors,
        collisions,
    })
}

fn base_record(label: &str, model: &RobotModel, data: &[GoalData]) -> MetricsRecord {
    let n_ee = model.n_ee();
    let mut pos = Vec::new();
    let mut ang = Vec::new();
    let mut pos_ee = vec![Vec::new(); n_ee];
    let mut ang_ee = vec![Vec::new(); n_ee];
    let mut n_sol = 0;
    let mut n_col = 0;
    for g in data {
        n_sol += g.sols.len();
        n_col += g.collisions.iter().filter(|&&c| c).count();
        for errs in &g.errors {
            for (k, e) in errs.iter().enumerate() {
                if let Some((p, a)) = e {
                    pos.push(*p);
                    ang.push(*a);
                    pos_ee[k].push(*p);
                    ang_ee[k].push(*a);
                }
            }
        }
    }
    let (pos_mm_mean, pos_mm_std) = mean_std(&pos);
    let (ang_deg_mean, ang_deg_std) = mean_std(&ang);
    let per_ee =
        |v: &[Vec<f64>]| -> Vec<Option<f64>> { v.iter().map(|x| (!x.is_empty()).then(|| mean_std(x).0)).collect() };
    MetricsRecord {
        label: label.to_string(),
        robot: model.name().to_string(),
        n_goals: data.len(),
        n_solutions: n_sol,
        collision_rate: if n_sol == 0 { 0.0 } else { n_col as f64 / n_sol as f64 },
        pos_mm_mean,
        pos_mm_std,
        ang_deg_mean,
        ang_deg_std,
        pos_mm_ee: per_ee(&pos_ee),
        ang_deg_ee: per_ee(&ang_ee),
        diversity: None,
        success_rate: None,
        iters_mean: None,
        iters_std: None,
        joint_diff_pct: None,
        manipulability_mean: None,
        manip_improvement_pct: None,
        offset_m: None,
        shortfall_mm: None,
    }
}

fn stored(label: &str, data: &[GoalData]) -> StoredSolutions {
    StoredSolutions {
        label: label.to_string(),
        per_goal: data.iter().map(|g| g.sols.clone()).collect(),
        collisions: data.iter().map(|g| g.collisions.clone()).collect(),
    }
}

fn task1(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let goals = test_goals(m.robot, cfg.n_goals, cfg.seed)?;
    let per_goal: Vec<(GoalData, Option<f64>)> = goals
        .par_iter()
        .enumerate()
        .map(|(i, (_, poses))| {
            let gs = GoalSet::full(poses);
            let sols = generate(cfg, m, &gs, i, &[])?;
            let seeds = random_seeds(m.robot, cfg.samples_per_goal, cfg.seed, i)?;
            let (_, refined) = solve_batch(m.robot, &gs, &seeds, &cfg.refine, SeedSource::Random)?;
            let baseline: Vec<Vec<f64>> = refined.into_iter().filter(|r| r.success).map(|r| r.q_final).collect();
            // goals where the baseline finds fewer than two distinct solutions carry no spread to compare against
            let div = match diversity_score(&sols, &baseline) {
                Ok(d) => Some(d),
                Err(EvalError::TooFewSolutions(_) | EvalError::DegenerateBaseline) => None,
                Err(e) => return Err(e),
            };
            Ok((goal_data(m.robot, &gs, sols)?, div))
        })
        .collect::<Result<_, EvalError>>()?;
    let divs: Vec<f64> = per_goal.iter().filter_map(|(_, d)| *d).collect();
    let data: Vec<GoalData> = per_goal.into_iter().map(|(g, _)| g).collect();
    let mut rec = base_record("generated", m.robot, &data);
    rec.diversity = (!divs.is_empty()).then(|| mean_std(&divs).0);
    Ok((vec![rec], vec![stored("generated", &data)]))
}

fn seeding_record(
    label: &str,
    model: &RobotModel,
    runs: &[(GoalSet, RefineResult, Vec<RefineResult>)],
) -> Result<MetricsRecord, EvalError> {
    let data: Vec<GoalData> = runs
        .iter()
        .map(|(gs, best, _)| goal_data(model, gs, vec![best.q_final.clone()]))
        .collect::<Result<_, _>>()?;
    let mut rec = base_record(label, model, &data);
    let all: Vec<&RefineResult> = runs.iter().flat_map(|(_, _, a)| a).collect();
    let iters: Vec<f64> = all.iter().filter(|r| r.success).map(|r| r.iters_used as f64).collect();
    rec.success_rate = Some(iters.len() as f64 / all.len() as f64);
    if !iters.is_empty() {
        let (mean, std) = mean_std(&iters);
        rec.iters_mean = Some(mean);
        rec.iters_std = Some(std);
    }
    Ok(rec)
}

fn task2(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let goals = test_goals(m.robot, cfg.n_goals, cfg.seed)?;
    type Run = (GoalSet, RefineResult, Vec<RefineResult>);
    let runs: Vec<(Run, Run)> = goals
        .par_iter()
        .enumerate()
        .map(|(i, (_, poses))| {
            let gs = GoalSet::full(poses);
            let gen = generate(cfg, m, &gs, i, &[])?;
            let (gb, ga) = solve_batch(m.robot, &gs, &gen, &cfg.refine, SeedSource::Generated)?;
            let rnd = random_seeds(m.robot, cfg.samples_per_goal, cfg.seed, i)?;
            let (rb, ra) = solve_batch(m.robot, &gs, &rnd, &cfg.refine, SeedSource::Random)?;
            Ok(((gs.clone(), gb, ga), (gs, rb, ra)))
        })
        .collect::<Result<_, EvalError>>()?;
    let (gen, rnd): (Vec<Run>, Vec<Run>) = runs.into_iter().unzip();
    Ok((
        vec![
            seeding_record("generated", m.robot, &gen)?,
            seeding_record("random", m.robot, &rnd)?,
        ],
        Vec::new(),
    ))
}

fn guided_pair(
    cfg: &BenchConfig,
    m: &BenchModel<'_>,
    goals: &[GoalSet],
    objectives: impl Fn(usize) -> Vec<Objective> + Sync,
) -> Result<(Vec<GoalData>, Vec<GoalData>), EvalError> {
    let pairs: Vec<(GoalData, GoalData)> = goals
        .par_iter()
        .enumerate()
        .map(|(i, gs)| {
            let plain = generate(cfg, m, gs, i, &[])?;
            let guided = generate(cfg, m, gs, i, &objectives(i))?;
            Ok((goal_data(m.robot, gs, plain)?, goal_data(m.robot, gs, guided)?))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(pairs.into_iter().unzip())
}

fn task4_warm(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let limits = m.robot.limits()?;
    let priors = test_goals(m.robot, cfg.n_goals, cfg.seed)?;
    let mut rng = stream(cfg.seed, GOAL_STREAM + 1);
    let goals: Vec<GoalSet> = priors
        .iter()
        .map(|(q, _)| {
            let target: Vec<f64> = q
                .iter()
                .zip(&limits)
                .map(|(v, (lo, hi))| (v + rng.random_range(-1.0..=1.0) * cfg.warm_offset).clamp(*lo, *hi))
                .collect();
            Ok(GoalSet::full(&forward_kinematics(m.robot, &target)?))
        })
        .collect::<Result<_, EvalError>>()?;
    let (plain, guided) = guided_pair(cfg, m, &goals, |i| {
        vec![Objective::warm_start(priors[i].0.clone(), cfg.warm_weight)]
    })?;
    let jd = |data: &[GoalData]| -> Result<f64, EvalError> {
        let per: Vec<f64> = data
            .iter()
            .zip(&priors)
            .map(|(g, (p, _))| joint_difference(&g.sols, p, &limits))
            .collect::<Result<_, _>>()?;
        Ok(mean_std(&per).0)
    };
    let mut a = base_record("unguided", m.robot, &plain);
    a.joint_diff_pct = Some(jd(&plain)?);
    let mut b = base_record("guided", m.robot, &guided);
    b.joint_diff_pct = Some(jd(&guided)?);
    Ok((vec![a, b], vec![stored("unguided", &plain), stored("guided", &guided)]))
}

fn mean_manipulability(model: &RobotModel, data: &[GoalData]) -> Result<f64, EvalError> {
    let vals: Vec<f64> = data
        .iter()
        .flat_map(|g| &g.sols)
        .map(|q| total_manipulability(model, q))
        .collect::<Result<_, _>>()?;
    Ok(mean_std(&vals).0)
}

fn task4_manip(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let goals: Vec<GoalSet> = test_goals(m.robot, cfg.n_goals, cfg.seed)?
        .iter()
        .map(|(_, p)| GoalSet::full(p))
        .collect();
    let (plain, guided) = guided_pair(cfg, m, &goals, |_| vec![Objective::manipulability(cfg.manip_weight)])?;
    let mp = mean_manipulability(m.robot, &plain)?;
    let mg = mean_manipulability(m.robot, &guided)?;
    let mut a = base_record("unguided", m.robot, &plain);
    a.manipulability_mean = Some(mp);
    let mut b = base_record("guided", m.robot, &guided);
    b.manipulability_mean = Some(mg);
    b.manip_improvement_pct = Some(if mp > 0.0 { (mg - mp) / mp * 100.0 } else { 0.0 });
    Ok((vec![a, b], vec![stored("unguided", &plain), stored("guided", &guided)]))
}

/// Masks `m` slots chosen uniformly, with `m` uniform over `0..n_ee`.
fn masked_goals(poses: &[Pose], rng: &mut ChaCha8Rng) -> (usize, GoalSet) {
    let n = poses.len();
    let m = rng.random_range(0..n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut slots: Vec<GoalSlot> = poses.iter().cloned().map(GoalSlot::Specified).collect();
    for &k in &idx[..m] {
        slots[k] = GoalSlot::Unspecified;
    }
    (m, GoalSet::new(slots))
}

fn task5(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let mut rng = stream(cfg.seed, MASK_STREAM);
    let goals: Vec<(usize, GoalSet)> = test_goals(m.robot, cfg.n_goals, cfg.seed)?
        .iter()
        .map(|(_, p)| masked_goals(p, &mut rng))
        .collect();
    let data: Vec<GoalData> = goals
        .par_iter()
        .enumerate()
        .map(|(i, (_, gs))| goal_data(m.robot, gs, generate(cfg, m, gs, i, &[])?))
        .collect::<Result<_, EvalError>>()?;
    let mut records = Vec::new();
    let mut sols = Vec::new();
    let mut buckets: Vec<Vec<GoalData>> = (0..m.robot.n_ee()).map(|_| Vec::new()).collect();
    for ((k, _), d) in goals.iter().zip(data) {
        buckets[*k].push(d);
    }
    for (k, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let label = format!("masked_{k}");
        records.push(base_record(&label, m.robot, bucket));
        sols.push(stored(&label, bucket));
    }
    Ok((records, sols))
}

fn task6(cfg: &BenchConfig, models: &[BenchModel<'_>]) -> Result<Rows, EvalError> {
    let mut records = Vec::new();
    let mut sols = Vec::new();
    for m in models {
        let goals = test_goals(m.robot, cfg.n_goals, cfg.seed)?;
        let data: Vec<GoalData> = goals
            .par_iter()
            .enumerate()
            .map(|(i, (_, poses))| {
                let gs = GoalSet::full(poses);
                goal_data(m.robot, &gs, generate(cfg, m, &gs, i, &[])?)
            })
            .collect::<Result<_, EvalError>>()?;
        records.push(base_record(m.label, m.robot, &data));
        sols.push(stored(m.label, &data));
    }
    Ok((records, sols))
}

/// Reach of the first end effector with every joint straightened: the sum of
/// joint-origin offsets along its path plus the largest travel of prismatic joints.
/// Exact for planar chains whose offsets are perpendicular to their axes.
pub fn straight_reach(model: &RobotModel) -> f64 {
    model
        .ee_path(0)
        .iter()
        .map(|&j| {
            let spec = &model.joints()[j];
            let travel = match (spec.kind, spec.limits) {
                (JointKind::Prismatic, Some((lo, hi))) => lo.abs().max(hi.abs()),
                _ => 0.0,
            };
            spec.origin.position.norm() + travel
        })
        .sum()
}

/// Outward sweep for the first end effector in the base xy-plane.
///
/// Each goal direction `theta` is drawn uniformly; the goal sits at
/// `reach + offset` along it with yaw `theta`, so a straightened chain meets
/// the orientation exactly and the shortest possible position error is the
/// shortfall `max(0, distance - reach)`. Other end effectors are unspecified.
fn unreachable_sweep(cfg: &BenchConfig, m: &BenchModel<'_>) -> Result<Rows, EvalError> {
    let reach = straight_reach(m.robot);
    let mut rng = stream(cfg.seed, GOAL_STREAM + 2);
    let thetas: Vec<f64> = (0..cfg.n_goals)
        .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
        .collect();
    let n_ee = m.robot.n_ee();
    let mut records = Vec::new();
    let mut sols = Vec::new();
    let total = cfg.sweep_inside + cfg.sweep_outside + 1;
    for k in 0..total {
        let offset = (k as f64 - cfg.sweep_inside as f64) * cfg.sweep_step;
        let dist = reach + offset;
        let data: Vec<GoalData> = thetas
            .par_iter()
            .enumerate()
            .map(|(i, &theta)| {
                let goal = Pose::new(
                    Vector3::new(dist * theta.cos(), dist * theta.sin(), 0.0),
                    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta),
                );
                let mut slots = vec![GoalSlot::Unspecified; n_ee];
                slots[0] = GoalSlot::Specified(goal);
                let gs = GoalSet::new(slots);
                let seeds = generate(cfg, m, &gs, i, &[])?;
                let (best, _) = solve_batch(m.robot, &gs, &seeds, &cfg.refine, SeedSource::Generated)?;
                goal_data(m.robot, &gs, vec![best.q_final])
            })
            .collect::<Result<_, EvalError>>()?;
        let label = format!("offset_{:+.3}", offset);
        let mut rec = base_record(&label, m.robot, &data);
        rec.offset_m = Some(offset);
        rec.shortfall_mm = Some(offset.max(0.0) * 1000.0);
        records.push(rec);
        sols.push(stored(&label, &data));
    }
    Ok((records, sols))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Flat table with one column per end effector for the per-EE errors.
pub fn to_csv(report: &Report) -> String {
    let n_ee = report.records.iter().map(|r| r.pos_mm_ee.len()).max().unwrap_or(0);
    let mut out =
        String::from("label,robot,n_goals,n_solutions,collision_rate,pos_mm_mean,pos_mm_std,ang_deg_mean,ang_deg_std");
    for k in 0..n_ee {
        let _ = write!(out, ",pos_mm_ee{k},ang_deg_ee{k}");
    }
    out.push_str(
        ",diversity,success_rate,iters_mean,iters_std,joint_diff_pct,manipulability_mean,manip_improvement_pct,offset_m,shortfall_mm\n",
    );
    for r in &report.records {
        let _ = write!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.robot,
            r.n_goals,
            r.n_solutions,
            r.collision_rate,
            r.pos_mm_mean,
            r.pos_mm_std,
            r.ang_deg_mean,
            r.ang_deg_std
        );
        for k in 0..n_ee {
            let _ = write!(
                out,
                ",{},{}",
                opt(r.pos_mm_ee.get(k).copied().flatten()),
                opt(r.ang_deg_ee.get(k).copied().flatten())
            );
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{}",
            opt(r.diversity),
            opt(r.success_rate),
            opt(r.iters_mean),
            opt(r.iters_std),
            opt(r.joint_diff_pct),
            opt(r.manipulability_mean),
            opt(r.manip_improvement_pct),
            opt(r.offset_m),
            opt(r.shortfall_mm)
        );
    }
    out
}

/// Writes `<scenario>.csv` and `<scenario>.json` into `dir` and returns both paths.
pub fn write_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", report.scenario.name()));
    let json = dir.join(format!("{}.json", report.scenario.name()));
    std::fs::write(&csv, to_csv(report))?;
    std::fs::write(&json, serde_json::to_vec_pretty(report)?)?;
    Ok((csv, json))
}

pub fn read_report(path: &Path) -> Result<Report, EvalError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
