//! Miniature Transformer encoder-decoder: weights, recording tape,
//! decoding and training.

pub mod config;
pub mod graph;
mod incremental;
pub mod train;
pub mod transformer;
pub mod weights;

pub use config::ModelConfig;
pub use graph::{Graph, Node, NodeId, Op, Stack, Tag};
pub use train::{batch_gradients, example_loss, train_toy, train_with, Example, GradientEngine, TrainConfig, TrainReport};
pub use transformer::{
    beam_decode, beam_search, decode_logits, encode, force_decode, greedy_decode, sequence_logprob, ActivationTrace, DecodeResult,
    LengthNormalization,
};
pub use weights::{ParamId, TransformerWeights};
