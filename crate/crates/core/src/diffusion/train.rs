use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule};
use crate::datagen::Dataset;
use crate::denoiser::{
    draw_noisy_batch, init_params, loss_and_grads_fixed, ArchConfig, DenoiserParams, NoisyBatch, Weights, POSE_FEATURES,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step along a cosine curve; equal to
    /// `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub weight_decay: f64,
    /// Per-slot probability of replacing a goal with the empty token.
    pub p_drop: f64,
    pub seed: u64,
    /// Gradient shards evaluated in parallel per batch.
    pub workers: usize,
    /// Reduce shard gradients in a fixed order.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            final_learning_rate: 1e-3,
            weight_decay: 0.0,
            p_drop: 0.2,
            seed: 0,
            workers: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::InvalidTrainConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs ≥ 1 required");
        }
        if self.batch_size < 1 {
            return bad("batch_size ≥ 1 required");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.final_learning_rate > 0.0 && self.final_learning_rate <= self.learning_rate) {
            return bad("final_learning_rate must be positive and at most learning_rate");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad("p_drop must be in [0, 1)");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub log: Vec<EpochLog>,
}

/// Renders the log as `epoch,loss,wall_ms` CSV.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,wall_ms\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.wall_ms));
    }
    s
}

struct AdamW {
    m: Weights<f32>,
    v: Weights<f32>,
    step: i32,
}

impl AdamW {
    fn new(w: &Weights<f32>) -> Self {
        Self {
            m: w.map(|_| 0.0),
            v: w.map(|_| 0.0),
            step: 0,
        }
    }

    fn update(&mut self, w: &mut Weights<f32>, g: &Weights<f32>, lr: f64, wd: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let grads = g.tensors();
        let params = w.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), gr) in params.into_iter().zip(ms).zip(vs).zip(grads) {
            for (((pi, mi), vi), &gi) in p.1.iter_mut().zip(m.1.iter_mut()).zip(v.1.iter_mut()).zip(gr.1) {
                let gi = gi as f64;
                let mn = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * gi;
                let vn = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let step = (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS) + wd * *pi as f64;
                *pi = (*pi as f64 - lr * step) as f32;
            }
        }
    }
}

/// Normalized `q` rows and pose-feature rows of the whole dataset.
fn normalized_arrays(dataset: &Dataset) -> (Array2<f32>, Array2<f32>) {
    let n = dataset.len();
    let (dof, n_ee) = (dataset.dof, dataset.n_ee);
    let stats = &dataset.stats;
    let mut q = Array2::zeros((n, dof));
    let mut f = Array2::zeros((n * n_ee, POSE_FEATURES));
    for i in 0..n {
        let qn = stats.normalize_q(&dataset.q_f64(i));
        for j in 0..dof {
            q[[i, j]] = qn[j] as f32;
        }
        for (e, pose) in dataset.poses(i).chunks_exact(POSE_FEATURES).enumerate() {
            let row = i * n_ee + e;
            for k in 0..3 {
                f[[row, k]] = ((pose[k] as f64 - stats.pos_center[k]) / stats.pos_scale) as f32;
            }
            for k in 3..POSE_FEATURES {
                f[[row, k]] = pose[k];
            }
        }
    }
    (q, f)
}

fn gather(src: &Array2<f32>, rows: impl Iterator<Item = usize>, width_rows: usize) -> Array2<f32> {
    let idx: Vec<usize> = rows.flat_map(|r| (r * width_rows)..(r + 1) * width_rows).collect();
    src.select(ndarray::Axis(0), &idx)
}

/// Splits a drawn batch into `k` contiguous shards.
fn shard(batch: &NoisyBatch<f32>, k: usize) -> Vec<NoisyBatch<f32>> {
    let b = batch.q_t.nrows();
    let per = b.div_ceil(k);
    let rows_per = batch.cond.feats.nrows() / b;
    (0..b)
        .step_by(per)
        .map(|start| {
            let end = (start + per).min(b);
            NoisyBatch {
                q_t: batch.q_t.slice(ndarray::s![start..end, ..]).to_owned(),
                t_index: batch.t_index[start..end].to_vec(),
                eps: batch.eps.slice(ndarray::s![start..end, ..]).to_owned(),
                cond: crate::denoiser::Conditioning {
                    feats: batch
                        .cond
                        .feats
                        .slice(ndarray::s![start * rows_per..end * rows_per, ..])
                        .to_owned(),
                    specified: batch.cond.specified[start * rows_per..end * rows_per].to_vec(),
                    n_tokens: batch.cond.n_tokens,
                },
            }
        })
        .collect()
}

fn batch_gradient(params: &DenoiserParams, batch: &NoisyBatch<f32>, cfg: &TrainConfig) -> (f64, Weights<f32>) {
    let b = batch.q_t.nrows();
    let k = cfg.workers.clamp(1, b);
    if k == 1 {
        let (l, g) = loss_and_grads_fixed(&params.weights, &params.arch, batch);
        return (l as f64, g);
    }
    let shards = shard(batch, k);
    let parts: Vec<(f64, f32, Weights<f32>)> = shards
        .par_iter()
        .map(|s| {
            let (l, g) = loss_and_grads_fixed(&params.weights, &params.arch, s);
            let frac = s.q_t.nrows() as f32 / b as f32;
            (l as f64 * frac as f64, frac, g)
        })
        .collect();
    let combine = |mut acc: (f64, Weights<f32>), (l, frac, g): (f64, f32, Weights<f32>)| {
        acc.0 += l;
        acc.1.add_scaled(&g, frac);
        acc
    };
    let zero = (0.0, params.weights.map(|_| 0.0));
    if cfg.deterministic {
        parts.into_iter().fold(zero, combine)
    } else {
        parts
            .into_par_iter()
            .fold(|| (0.0, params.weights.map(|_| 0.0)), combine)
            .reduce(
                || (0.0, params.weights.map(|_| 0.0)),
                |mut a, b| {
                    a.0 += b.0;
                    a.1.add_scaled(&b.1, 1.0);
                    a
                },
            )
    }
}

/// Trains a fresh network on `dataset`.
pub fn train(
    dataset: &Dataset,
    arch: ArchConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome, DiffusionError> {
    train_with_progress(dataset, arch, cfg, schedule, |_| {})
}

/// As [`train`], reporting each finished epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    arch: ArchConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, DiffusionError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DiffusionError::InvalidTrainConfig("dataset is empty".into()));
    }
    let arch = ArchConfig {
        timesteps: schedule.steps(),
        ..arch
    };
    let mut params = init_params(arch, dataset.dof, dataset.n_ee, dataset.stats.clone(), cfg.seed)?;
    let (q_all, f_all) = normalized_arrays(dataset);
    let mut opt = AdamW::new(&params.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let total_steps = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let q0 = gather(&q_all, chunk.iter().copied(), 1);
            let feats = gather(&f_all, chunk.iter().copied(), dataset.n_ee);
            let batch = draw_noisy_batch(&params, &q0, &feats, schedule, cfg.p_drop, &mut rng)?;
            let (loss, grads) = batch_gradient(&params, &batch, cfg);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(DiffusionError::Diverged { epoch });
            }
            opt.update(
                &mut params.weights,
                &grads,
                cosine_lr(cfg, step, total_steps),
                cfg.weight_decay,
            );
            step += 1;
            sum += loss;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: sum / batches as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

fn cosine_lr(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let frac = if total > 1 {
        step as f64 / (total - 1) as f64
    } else {
        0.0
    };
    let (hi, lo) = (cfg.learning_rate, cfg.final_learning_rate);
    lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
}
