//! Joint-aware autoencoder: a point encoder that splits a global latent into joint
//! tokens, a mixing transformer with extrinsic and intrinsic heads, and a
//! token decoder back to the registered point cloud.

mod config;
mod loss;
mod model;

pub use config::{AEConfig, ConditionMode};
pub use loss::{
    loss_cross, loss_prior, loss_prior_graph, loss_rec, loss_rec_graph, loss_total, loss_total_graph, LossBreakdown,
    PairBatch,
};
pub use model::{
    check_layout, decode_graph, encode_graph, global_latent_graph, init_params, mix_graph, reparameterize,
    reparameterize_graph, standard_normal, tokenize_graph, AEModel, EncodedVars, Posterior, Sampling, POS_EMBEDDING,
};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum AutoencoderError {
    #[error("invalid autoencoder config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
