//! Noise predictor: goal tokenizer, time-conditioned residual embedding of the
//! noisy configuration, stacked cross-attention blocks and an output head,
//! together with its exact gradient.

mod checkpoint;
mod net;
mod params;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::datagen::NormStats;
use crate::diffusion::NoiseSchedule;
use crate::kinematics::{Pose, RobotModel};

pub use checkpoint::{checkpoint_bytes, load_params, save_params, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{positional_encoding, Conditioning};
pub use params::{ArchConfig, Block, ConditioningMode, Linear, Scalar, Weights, POSE_FEATURES, TIME_FEATURES};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("flat conditioning requires every goal slot to be specified")]
    FlatModeUnspecified,
    #[error("goal set has no specified slot")]
    NoSpecifiedGoal,
    #[error("timestep index {t} out of range for {steps} steps")]
    Timestep { t: usize, steps: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One goal entry: a target pose or a request to marginalize that end effector.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalSlot {
    Specified(Pose),
    Unspecified,
}

/// Ordered goals, one slot per end effector.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalSet {
    pub slots: Vec<GoalSlot>,
}

impl GoalSet {
    pub fn new(slots: Vec<GoalSlot>) -> Self {
        Self { slots }
    }

    /// Every slot specified.
    pub fn full(poses: &[Pose]) -> Self {
        Self::new(poses.iter().cloned().map(GoalSlot::Specified).collect())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn specified(&self) -> impl Iterator<Item = (usize, &Pose)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| match s {
            GoalSlot::Specified(p) => Some((i, p)),
            GoalSlot::Unspecified => None,
        })
    }

    pub fn n_specified(&self) -> usize {
        self.specified().count()
    }
}

/// Trained (or freshly initialized) network plus the normalization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: ArchConfig,
    pub dof: usize,
    pub n_ee: usize,
    pub stats: NormStats,
    pub weights: Weights<f32>,
}

impl DenoiserParams {
    /// Fails when the network was built for a robot of different dimensions.
    pub fn check_model(&self, model: &RobotModel) -> Result<(), DenoiserError> {
        if self.dof != model.dof() || self.n_ee != model.n_ee() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "checkpoint has dof={}, n_ee={}; robot has dof={}, n_ee={}",
                self.dof,
                self.n_ee,
                model.dof(),
                model.n_ee()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }
}

pub fn init_params(
    arch: ArchConfig,
    dof: usize,
    n_ee: usize,
    stats: NormStats,
    seed: u64,
) -> Result<DenoiserParams, DenoiserError> {
    arch.validate()?;
    if dof == 0 || n_ee == 0 || stats.dof() != dof {
        return Err(DenoiserError::ShapeMismatch(format!(
            "dof={dof}, n_ee={n_ee}, stats dof={}",
            stats.dof()
        )));
    }
    Ok(DenoiserParams {
        weights: params::init_weights(&arch, dof, n_ee, seed),
        arch,
        dof,
        n_ee,
        stats,
    })
}

/// Conditioning rows for `repeat` copies of one goal set.
pub fn goal_conditioning(
    params: &DenoiserParams,
    goals: &GoalSet,
    repeat: usize,
) -> Result<Conditioning<f32>, DenoiserError> {
    if goals.len() != params.n_ee {
        return Err(DenoiserError::ShapeMismatch(format!(
            "{} goal slots for {} end effectors",
            goals.len(),
            params.n_ee
        )));
    }
    let mut one = Vec::with_capacity(goals.len() * POSE_FEATURES);
    let mut mask = Vec::with_capacity(goals.len());
    for slot in &goals.slots {
        match slot {
            GoalSlot::Specified(p) => {
                one.extend(params.stats.pose_features(p).iter().map(|&v| v as f32));
                mask.push(true);
            }
            GoalSlot::Unspecified => {
                one.extend([0.0f32; POSE_FEATURES]);
                mask.push(false);
            }
        }
    }
    let feats: Vec<f32> = one.iter().copied().cycle().take(one.len() * repeat).collect();
    let specified: Vec<bool> = mask.iter().copied().cycle().take(mask.len() * repeat).collect();
    conditioning_from_rows(params.arch.conditioning, feats, specified, params.n_ee)
}

/// Builds conditioning from per-slot feature rows laid out batch-major.
fn conditioning_from_rows<F: Scalar>(
    mode: ConditioningMode,
    feats: Vec<F>,
    specified: Vec<bool>,
    n_ee: usize,
) -> Result<Conditioning<F>, DenoiserError> {
    let rows = specified.len();
    match mode {
        ConditioningMode::Tokens => Ok(Conditioning {
            feats: Array2::from_shape_vec((rows, POSE_FEATURES), feats).expect("feature length"),
            specified,
            n_tokens: n_ee,
        }),
        ConditioningMode::Flat => {
            if specified.iter().any(|s| !s) {
                return Err(DenoiserError::FlatModeUnspecified);
            }
            let b = rows / n_ee;
            Ok(Conditioning {
                feats: Array2::from_shape_vec((b, POSE_FEATURES * n_ee), feats).expect("feature length"),
                specified: vec![true; b],
                n_tokens: 1,
            })
        }
    }
}

/// Goal tokens, `N_ee x d_model` (or `1 x d_model` in flat mode).
pub fn encode_goals(goals: &GoalSet, params: &DenoiserParams) -> Result<Array2<f32>, DenoiserError> {
    let cond = goal_conditioning(params, goals, 1)?;
    Ok(net::embed_goals(&params.weights, &cond))
}

/// Predicted noise for one normalized configuration at 0-based timestep index `t`.
pub fn predict_noise(
    params: &DenoiserParams,
    q_t: &[f64],
    goals: &GoalSet,
    t: usize,
) -> Result<Vec<f64>, DenoiserError> {
    if q_t.len() != params.dof {
        return Err(DenoiserError::ShapeMismatch(format!(
            "configuration has {} entries, network expects {}",
            q_t.len(),
            params.dof
        )));
    }
    let cond = goal_conditioning(params, goals, 1)?;
    let x = Array2::from_shape_fn((1, params.dof), |(_, j)| q_t[j] as f32);
    let y = predict_noise_batch(params, &x, &cond, &[t])?;
    Ok(y.iter().map(|&v| v as f64).collect())
}

/// Batched prediction; `t_index` holds one 0-based timestep per row.
pub fn predict_noise_batch(
    params: &DenoiserParams,
    q_t: &Array2<f32>,
    cond: &Conditioning<f32>,
    t_index: &[usize],
) -> Result<Array2<f32>, DenoiserError> {
    if q_t.ncols() != params.dof || q_t.nrows() != t_index.len() || cond.batch_len() != q_t.nrows() {
        return Err(DenoiserError::ShapeMismatch(format!(
            "batch {}x{}, {} timesteps, {} goal rows",
            q_t.nrows(),
            q_t.ncols(),
            t_index.len(),
            cond.batch_len()
        )));
    }
    if let Some(&t) = t_index.iter().find(|&&t| t >= params.arch.timesteps) {
        return Err(DenoiserError::Timestep {
            t,
            steps: params.arch.timesteps,
        });
    }
    let (y, _) = net::forward(&params.weights, &params.arch, q_t, t_index, cond);
    Ok(y)
}

/// A training batch with every random draw already made.
#[derive(Debug, Clone)]
pub struct NoisyBatch<F> {
    pub q_t: Array2<F>,
    /// 0-based timestep index per row (`t - 1`).
    pub t_index: Vec<usize>,
    pub eps: Array2<F>,
    pub cond: Conditioning<F>,
}

/// Mean squared noise-prediction error and its gradient for fixed draws.
pub fn loss_and_grads_fixed<F: Scalar>(
    weights: &Weights<F>,
    arch: &ArchConfig,
    batch: &NoisyBatch<F>,
) -> (F, Weights<F>) {
    let (y, cache) = net::forward(weights, arch, &batch.q_t, &batch.t_index, &batch.cond);
    let b = F::of(batch.q_t.nrows() as f64);
    let diff = &y - &batch.eps;
    let loss = diff.iter().map(|&v| v * v).sum::<F>() / b;
    let dy = diff.mapv(|v| F::of(2.0) * v / b);
    let grads = net::backward(weights, arch, &cache, &batch.cond, &dy);
    (loss, grads)
}

/// Loss only, for fixed draws.
pub fn loss_fixed<F: Scalar>(weights: &Weights<F>, arch: &ArchConfig, batch: &NoisyBatch<F>) -> F {
    let (y, _) = net::forward(weights, arch, &batch.q_t, &batch.t_index, &batch.cond);
    let b = F::of(batch.q_t.nrows() as f64);
    (&y - &batch.eps).iter().map(|&v| v * v).sum::<F>() / b
}

/// Draws timesteps, noise and slot masks for a batch of clean examples.
///
/// `q0` is `B x dof` normalized; `pose_feats` is `(B * n_ee) x 7` normalized
/// pose features. Each slot is masked independently with probability
/// `p_drop` (tokens mode only).
pub fn draw_noisy_batch<R: Rng + ?Sized>(
    params: &DenoiserParams,
    q0: &Array2<f32>,
    pose_feats: &Array2<f32>,
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<NoisyBatch<f32>, DenoiserError> {
    let b = q0.nrows();
    if b == 0 || q0.ncols() != params.dof || pose_feats.dim() != (b * params.n_ee, POSE_FEATURES) {
        return Err(DenoiserError::ShapeMismatch(format!(
            "q0 {:?}, pose features {:?}",
            q0.dim(),
            pose_feats.dim()
        )));
    }
    if schedule.steps() != params.arch.timesteps {
        return Err(DenoiserError::ShapeMismatch(format!(
            "schedule has {} steps, network was built for {}",
            schedule.steps(),
            params.arch.timesteps
        )));
    }
    let mut t_index = Vec::with_capacity(b);
    let mut eps = Array2::zeros((b, params.dof));
    let mut q_t = Array2::zeros((b, params.dof));
    for r in 0..b {
        let t = rng.random_range(0..schedule.steps());
        t_index.push(t);
        let ab = schedule.alpha_bar[t];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..params.dof {
            let e: f64 = rng.sample(StandardNormal);
            eps[[r, j]] = e as f32;
            q_t[[r, j]] = (sa * q0[[r, j]] as f64 + sb * e) as f32;
        }
    }
    let mask_slots = params.arch.conditioning == ConditioningMode::Tokens && p_drop > 0.0;
    let specified: Vec<bool> = (0..b * params.n_ee)
        .map(|_| !(mask_slots && rng.random::<f64>() < p_drop))
        .collect();
    let feats = pose_feats.iter().copied().collect();
    let cond = conditioning_from_rows(params.arch.conditioning, feats, specified, params.n_ee)?;
    Ok(NoisyBatch {
        q_t,
        t_index,
        eps,
        cond,
    })
}

/// One training example: normalized configuration and its goals.
#[derive(Debug, Clone)]
pub struct Example {
    pub q0: Vec<f64>,
    pub goals: Vec<Pose>,
}

/// Draws noise, timesteps and slot masks for `batch`, then returns the loss
/// and exact gradient with respect to every weight.
pub fn loss_and_grads<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &[Example],
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut R,
) -> Result<(f64, Weights<f32>), DenoiserError> {
    let b = batch.len();
    let mut q0 = Array2::zeros((b, params.dof));
    let mut feats = Array2::zeros((b * params.n_ee, POSE_FEATURES));
    for (r, ex) in batch.iter().enumerate() {
        if ex.q0.len() != params.dof || ex.goals.len() != params.n_ee {
            return Err(DenoiserError::ShapeMismatch(format!("example {r}")));
        }
        for (j, &v) in ex.q0.iter().enumerate() {
            q0[[r, j]] = v as f32;
        }
        for (e, pose) in ex.goals.iter().enumerate() {
            for (k, v) in params.stats.pose_features(pose).iter().enumerate() {
                feats[[r * params.n_ee + e, k]] = *v as f32;
            }
        }
    }
    let noisy = draw_noisy_batch(params, &q0, &feats, schedule, p_drop, rng)?;
    let (loss, grads) = loss_and_grads_fixed(&params.weights, &params.arch, &noisy);
    Ok((loss as f64, grads))
}
