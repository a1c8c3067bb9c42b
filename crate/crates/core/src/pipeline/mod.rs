//! Datasets, training loops, checkpoints, evaluation and the ablation grid.

mod ablation;
mod checkpoint;
mod config;
mod dataset;
mod eval;
mod train;


pub use ablation::{run_ablation, table4_grid, trailing_mean_decreased, write_ablation_csv, AblationResult, AblationVariant};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, ModelConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{DataSource, DenoiserSize, DiffusionConfig, LrDecay, OptimizerConfig, Profile, RunConfig};
pub use dataset::{pair_sampler, Dataset, DatasetMeta, PairSampler, DATA_FILE, META_FILE, TEMPLATE_FILE};
pub use eval::{bone_lengths, evaluate, mean_bone_lengths, pelvis_normalize_cloud, reconstruction_mpvpe, Models};
pub use train::{
    ae_batch, derive_seed, encode_latents, train_autoencoder, train_extrinsic_ddpm, train_intrinsic_ddpm, AeRun,
    DdpmRun, Stage,
};

use std::path::PathBuf;

use crate::autoencoder::AutoencoderError;
use crate::diffusion::DiffusionError;
use crate::geometry::GeometryError;
use crate::latent::LatentError;
use crate::metrics::MetricsError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}; snapshot at {}", snapshot.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<not written>".into()))]
    NonFinite { step: usize, snapshot: Option<PathBuf> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Autoencoder(#[from] AutoencoderError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}
