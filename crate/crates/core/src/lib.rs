//! Model introspection for detecting detached hallucinations in neural
//! machine translation.
//!
//! The crate is `no_std` (with `alloc`). It contains:
//!
//! * [`model`]: a miniature Transformer encoder-decoder with a recording
//!   tape, used for training, decoding and as the activation trace that
//!   relevance propagation walks backwards.
//! * [`lrp`]: αβ layer-wise relevance propagation from each emitted token
//!   back to source tokens and target-prefix tokens.
//! * [`features`]: contribution-pattern metrics (normalized source
//!   contribution, high-contribution ratio, staticity) and the detector
//!   feature vector.
//! * [`perturb`]: source perturbations and BLEU-threshold labeling of
//!   contrastive pairs.
//! * [`detector`]: the small MLP classifier, baselines, ensembles and
//!   threshold tuning.
//! * [`metrics`]: BLEU, repetition counts, P/R/F1, AUC and friends.
//!
//! File formats, configuration and the command line live in the
//! `hallucheck` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod detector;
pub mod error;
pub mod features;
pub mod lrp;
pub mod math;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod seed;
pub mod tensor;
pub mod toy;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Matrix;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
