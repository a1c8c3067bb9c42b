//! Noise schedule, closed-form forward process, the two denoisers with their
//! objectives, parameter averaging and ancestral samplers.

mod denoiser;
mod ema;
mod sampler;
mod schedule;

pub use denoiser::{
    condition_input, ddpm_loss_extrinsic, ddpm_loss_graph, ddpm_loss_intrinsic, denoise_graph, init_denoiser,
    noised_batch, time_rows, Denoiser, DenoiserConfig, DenoiserKind, JointCondition,
};
pub use ema::EmaState;
pub use sampler::{
    ancestral_sample, cascade_sample, sample_extrinsics, sample_intrinsics, sample_intrinsics_batch, GeneratedBody,
};
pub use schedule::{linear_schedule, p_sample_step, q_sample, time_embed, NoiseSchedule};

use crate::autoencoder::AutoencoderError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error("step {t} outside 1..={steps}")]
    Step { t: usize, steps: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
}
