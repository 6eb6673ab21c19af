//! Noise schedule, forward/reverse process algebra, training loop and the
//! guided ancestral sampler.

mod sample;
mod schedule;
mod train;

use thiserror::Error;

use crate::denoiser::DenoiserError;
use crate::guidance::GuidanceError;

pub use sample::{sample, sample_rng, SampleConfig, SampleOutput};
pub use schedule::{
    estimate_q0, make_schedule, posterior_mean_var, q_sample, skip_posterior, timestep_plan, NoiseSchedule,
};
pub use train::{log_csv, train, train_with_progress, EpochLog, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid sample config: {0}")]
    InvalidSampleConfig(String),
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("goal set has no specified slot")]
    NoSpecifiedGoal,
    #[error("guidance failed at step {step}: {source}")]
    Guidance { step: usize, source: GuidanceError },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}
