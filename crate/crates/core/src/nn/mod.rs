//! Minimal reverse-mode autodiff and training machinery.
//!
//! Everything runs on plain f64 matrices: models build a fresh [`Graph`]
//! per utterance against a shared read-only [`ParamStore`], backward
//! accumulates into store-aligned gradients, and [`Adam`] applies them.
//! Per-example graphs make data parallelism trivial while keeping every
//! loss and gradient bit-reproducible.

mod ctc;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;

pub use ctc::{ctc_forward_backward, ctc_greedy_collapse};
pub use gradcheck::{max_relative_error, numeric_gradients};
pub use graph::{Graph, NodeId};
pub use layers::{
    causal_mask, positional_encoding, DecoderBlock, EncoderBlock, FeedForward, LayerNormLayer,
    LinearLayer, MultiHeadAttention,
};
pub use optim::{clip_global_norm, Adam};
pub use params::{Gradients, ParamStore};
