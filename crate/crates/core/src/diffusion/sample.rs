use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{skip_posterior, timestep_plan, DiffusionError, NoiseSchedule};
use crate::denoiser::{goal_conditioning, predict_noise_batch, DenoiserParams, GoalSet};
use crate::guidance::{combine, Objective};
use crate::kinematics::RobotModel;

/// Samples are denoised together in chunks of this many rows.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_samples: usize,
    /// Number of reverse steps actually taken, evenly spaced over `T..1`.
    pub steps_used: usize,
    /// Inject posterior noise at each step; otherwise follow the mean.
    pub stochastic: bool,
    pub seed: u64,
    /// Worker threads for chunks of samples.
    pub workers: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            steps_used: 25,
            stochastic: true,
            seed: 0,
            workers: 1,
        }
    }
}

/// Joint configurations in robot units plus a guidance diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<Vec<f64>>,
    /// Largest `|sigma^2 g| / |mu|` seen over all steps and samples.
    pub guidance_ratio: f64,
}

/// Per-sample random stream: sample `i` of seed `s` always sees the same draws.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Reverse diffusion from pure noise to configurations for `goals`, with the
/// mean of every step shifted by `sigma^2 g` from the objectives.
pub fn sample(
    params: &DenoiserParams,
    model: &RobotModel,
    goals: &GoalSet,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    objectives: &[Objective],
) -> Result<SampleOutput, DiffusionError> {
    params.check_model(model)?;
    if goals.n_specified() == 0 {
        return Err(DiffusionError::NoSpecifiedGoal);
    }
    if cfg.n_samples == 0 {
        return Err(DiffusionError::InvalidSampleConfig(
            "n_samples must be at least 1".into(),
        ));
    }
    if schedule.steps() != params.arch.timesteps {
        return Err(DiffusionError::InvalidSampleConfig(format!(
            "schedule has {} steps, network was trained for {}",
            schedule.steps(),
            params.arch.timesteps
        )));
    }
    let plan = timestep_plan(schedule.steps(), cfg.steps_used)?;
    // validates slot count and flat-mode compatibility up front
    goal_conditioning(params, goals, 1)?;

    let starts: Vec<usize> = (0..cfg.n_samples).step_by(CHUNK).collect();
    let run = |&start: &usize| {
        let n = CHUNK.min(cfg.n_samples - start);
        sample_chunk(params, model, goals, schedule, cfg, objectives, &plan, start, n)
    };
    let chunks: Vec<Result<(Vec<Vec<f64>>, f64), DiffusionError>> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| DiffusionError::InvalidSampleConfig(e.to_string()))?;
        pool.install(|| starts.par_iter().map(run).collect())
    } else {
        starts.iter().map(run).collect()
    };
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut ratio: f64 = 0.0;
    for c in chunks {
        let (s, r) = c?;
        samples.extend(s);
        ratio = ratio.max(r);
    }
    Ok(SampleOutput {
        samples,
        guidance_ratio: ratio,
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_chunk(
    params: &DenoiserParams,
    model: &RobotModel,
    goals: &GoalSet,
    schedule: &NoiseSchedule,
    cfg: &SampleConfig,
    objectives: &[Objective],
    plan: &[usize],
    start: usize,
    n: usize,
) -> Result<(Vec<Vec<f64>>, f64), DiffusionError> {
    let dof = params.dof;
    let cond = goal_conditioning(params, goals, n)?;
    let mut rngs: Vec<ChaCha8Rng> = (start..start + n).map(|i| sample_rng(cfg.seed, i)).collect();
    let mut q: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..dof).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let mut ratio: f64 = 0.0;
    for (k, &t) in plan.iter().enumerate() {
        let to = plan.get(k + 1).copied().unwrap_or(0);
        let x = Array2::from_shape_fn((n, dof), |(i, j)| q[i][j] as f32);
        let eps = predict_noise_batch(params, &x, &cond, &vec![t - 1; n])?;
        for (i, qi) in q.iter_mut().enumerate() {
            let eps_i: Vec<f64> = eps.row(i).iter().map(|&v| v as f64).collect();
            let (mu, var) = skip_posterior(qi, &eps_i, t, to, schedule);
            let g = combine(objectives, model, &params.stats, &mu)
                .map_err(|e| DiffusionError::Guidance { step: t, source: e })?;
            if !objectives.is_empty() {
                let shift = var * g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    ratio = ratio.max(shift / norm);
                }
            }
            let sd = var.sqrt();
            for j in 0..dof {
                let mut v = mu[j] + var * g[j];
                if cfg.stochastic && var > 0.0 {
                    let z: f64 = rngs[i].sample(StandardNormal);
                    v += sd * z;
                }
                qi[j] = v;
            }
        }
    }
    let out = q
        .into_iter()
        .map(|qi| {
            let clamped: Vec<f64> = qi.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            params.stats.denormalize_q(&clamped)
        })
        .collect();
    Ok((out, ratio))
}
