//! A small patch-token transformer with graph attention, camera-token
//! conditioning and attention biases, trained with a hand-written backward
//! pass.
//!
//! Per frame: patch embedding, optional graph attention on the embedded
//! tokens, `[camera; tokens]` through the self-attention blocks (optionally
//! bias-injected), one cross-frame block when several frames are given,
//! optional graph attention on the final tokens, then a linear per-patch
//! depth/confidence head and an MLP camera head.

mod config;
mod network;
mod params;

pub use config::{DegatPlacement, ModelConfig};
pub use network::{
    backward, embed_tokens, forward, loss_and_gradients, loss_value, output_loss, patchify, ForwardCache, ModelOutput,
    OutputGrads, FOCAL_EPS,
};
pub use params::{
    sgd_step, BiasParams, Block, Conditioning, Linear, ModelParams, Tensor, TensorMut, Tensors, BIAS_MLP_HIDDEN,
    CAMERA_OUTPUTS,
};
