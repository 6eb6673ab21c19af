//! Generative inverse kinematics for kinematic trees.
//!
//! A conditional denoising-diffusion model over joint configurations is trained
//! on collision-free samples of a robot, conditioned on a sequence of
//! end-effector pose tokens. Sampling supports objective guidance and partially
//! specified goals; a damped-least-squares refiner polishes samples to high
//! precision.

pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod evalbench;
pub mod fixtures;
pub mod guidance;
pub mod kinematics;
pub mod refiner;
