//! Dense arrays, a reverse-mode tape, network layers and gradient checking.

mod gradcheck;
mod graph;
mod nn;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use nn::{
    adaptive_modulate, adaptive_modulate_var, attention, attention_layer, feed_forward, init_attention,
    init_feed_forward, init_transformer_block, layer_norm, layer_norm_affine, linear, modulate,
    multi_head_attention, transformer_block,
};
pub use optim::{clip_grad_norm, AdamW};
pub use params::{Initializer, ParameterStore};
pub use tensor::{DType, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}
