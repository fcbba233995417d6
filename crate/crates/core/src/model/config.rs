use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the Transformer. Pre-norm residual blocks with a final layer
/// norm on both stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Desk-scale default: 2+2 layers, width 64, 4 heads, feed-forward 128.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            max_source_len: 64,
            max_target_len: 64,
            label_smoothing: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(alloc::format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::InvalidArgument("vocab_size must exceed the reserved ids".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument("d_model must be divisible by heads".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidArgument("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}
