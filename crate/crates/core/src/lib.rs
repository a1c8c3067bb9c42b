//! Joint-aware latent autoencoding and cascaded latent diffusion for articulated bodies.

pub mod numerics;
pub mod geometry;
pub mod latent;
pub mod autoencoder;
pub mod diffusion;
pub mod metrics;
pub mod pipeline;
