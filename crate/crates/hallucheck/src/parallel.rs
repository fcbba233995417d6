//! Thread-parallel implementations of the core's translation and gradient
//! interfaces. Work is split per sample and results are combined in input
//! order, so output does not depend on the number of threads.

use hallucheck_core::model::{beam_search, example_loss, greedy_decode, DecodeResult, Example, GradientEngine, TransformerWeights};
use hallucheck_core::perturb::Translator;
use hallucheck_core::vocab::TokenId;
use hallucheck_core::{Matrix, Result};
use rayon::prelude::*;

use crate::config::{DecodeConfig, Strategy};

pub fn decode(w: &TransformerWeights, src: &[TokenId], cfg: &DecodeConfig, trace: bool) -> Result<DecodeResult> {
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(w, src, cfg.max_len, trace),
        Strategy::Beam => beam_search(w, src, cfg.beam, cfg.max_len, cfg.length_normalization, trace),
    }
}

pub struct ParallelTranslator<'a> {
    pub weights: &'a TransformerWeights,
    pub decode: &'a DecodeConfig,
}

impl Translator for ParallelTranslator<'_> {
    fn translate(&self, sources: &[Vec<TokenId>]) -> Result<Vec<Vec<TokenId>>> {
        sources
            .par_iter()
            .map(|s| decode(self.weights, s, self.decode, false).map(|r| r.output))
            .collect()
    }
}

/// Per-example gradients in parallel, summed in batch order.
pub struct ParallelGradients;

impl GradientEngine for ParallelGradients {
    fn batch_gradients(&self, w: &TransformerWeights, batch: &[&Example]) -> Result<(f64, Vec<Matrix>)> {
        let parts: Vec<(f64, usize, Vec<Matrix>)> = batch
            .par_iter()
            .map(|ex| {
                let mut g = w.zeros_like();
                let (loss, n) = example_loss(w, ex, Some(&mut g))?;
                Ok((loss, n, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = w.zeros_like();
        let (mut loss, mut tokens) = (0.0, 0);
        for (l, n, g) in parts {
            loss += l;
            tokens += n;
            for (acc, part) in grads.iter_mut().zip(&g) {
                acc.add_assign(part);
            }
        }
        let inv = 1.0 / tokens.max(1) as f64;
        grads.iter_mut().for_each(|g| g.scale(inv));
        Ok((loss * inv, grads))
    }
}
