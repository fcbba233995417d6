//! Label-smoothed cross-entropy, gradients and the Adam training loop.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::graph::Graph;
use super::transformer::{decode_logits, encode, is_output_candidate, output_log_probs, ActivationTrace};
use super::weights::TransformerWeights;
use crate::error::{Error, Result};
use crate::math;
use crate::seed;
use crate::tensor::Matrix;
use crate::vocab::{TokenId, EOS};

/// One parallel training pair. `source` already ends with `</s>`;
/// `target` carries neither `<s>` nor `</s>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Example {
    /// Gold output: the target followed by `</s>`.
    pub fn gold(&self) -> Vec<TokenId> {
        let mut g = self.target.clone();
        g.push(EOS);
        g
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Scale of the inverse-square-root schedule
    /// `lr = factor · d^-0.5 · min(s^-0.5, s · warmup^-1.5)`.
    pub lr_factor: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            lr_factor: 1.0,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, step: usize, d_model: usize) -> f64 {
        let s = step.max(1) as f64;
        let warm = self.warmup.max(1) as f64;
        self.lr_factor / math::sqrt(d_model as f64) * (1.0 / math::sqrt(s)).min(s * math::powf(warm, -1.5))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token loss of each optimizer step's batch.
    pub losses: Vec<f64>,
}

/// Smoothed cross-entropy of one row against `gold`; writes d loss / d logits.
///
/// The target puts `1 − ε` on the gold token and spreads `ε` uniformly over
/// all emittable tokens, so a uniform prediction scores exactly `ln |C|`.
pub fn smoothed_cross_entropy(logits: &[f64], gold: TokenId, smoothing: f64, grad: &mut [f64]) -> f64 {
    let lp = output_log_probs(logits);
    let n_cand = (0..logits.len()).filter(|&i| is_output_candidate(i)).count() as f64;
    let mut loss = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if !is_output_candidate(i) {
            *g = 0.0;
            continue;
        }
        let q = smoothing / n_cand + if i == gold as usize { 1.0 - smoothing } else { 0.0 };
        loss -= q * lp[i];
        *g = math::exp(lp[i]) - q;
    }
    loss
}

/// Summed loss of one example and its token count; accumulates parameter
/// gradients of the summed loss into `grads` when given.
pub fn example_loss(w: &TransformerWeights, ex: &Example, grads: Option<&mut [Matrix]>) -> Result<(f64, usize)> {
    let smoothing = w.config().label_smoothing;
    let gold = ex.gold();
    let mut g = Graph::new();
    let memory = encode(&mut g, w, &ex.source)?;
    let logits = decode_logits(&mut g, w, memory, &ActivationTrace::decoder_inputs(&gold));
    let lm = g.value(logits);
    let mut dlogits = Matrix::zeros(lm.rows(), lm.cols());
    let mut loss = 0.0;
    for (t, &tok) in gold.iter().enumerate() {
        loss += smoothed_cross_entropy(lm.row(t), tok, smoothing, dlogits.row_mut(t));
    }
    if let Some(grads) = grads {
        g.backward(w, logits, dlogits, grads);
    }
    Ok((loss, gold.len()))
}

/// Mean per-token loss over `batch` and its gradient.
pub fn batch_gradients(w: &TransformerWeights, batch: &[&Example]) -> Result<(f64, Vec<Matrix>)> {
    let mut grads = w.zeros_like();
    let mut loss = 0.0;
    let mut tokens = 0;
    for ex in batch {
        let (l, n) = example_loss(w, ex, Some(&mut grads))?;
        loss += l;
        tokens += n;
    }
    let inv = 1.0 / tokens.max(1) as f64;
    grads.iter_mut().for_each(|g| g.scale(inv));
    Ok((loss * inv, grads))
}

/// Computes batch losses and gradients. The default runs serially; callers
/// with threads can supply a parallel implementation that reduces
/// per-example gradients in batch order.
pub trait GradientEngine {
    fn batch_gradients(&self, w: &TransformerWeights, batch: &[&Example]) -> Result<(f64, Vec<Matrix>)>;
}

pub struct SerialGradients;

impl GradientEngine for SerialGradients {
    fn batch_gradients(&self, w: &TransformerWeights, batch: &[&Example]) -> Result<(f64, Vec<Matrix>)> {
        batch_gradients(w, batch)
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn step(&mut self, w: &mut TransformerWeights, grads: &[Matrix], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for ((p, g), (m, v)) in w
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (math::sqrt(vhat) + cfg.adam_eps);
            }
        }
    }
}

/// Train from a seeded initialization. Batches are drawn by reshuffling the
/// corpus each epoch with a generator derived from `hyper.seed`.
pub fn train_toy(corpus: &[Example], cfg: &ModelConfig, hyper: &TrainConfig) -> Result<(TransformerWeights, TrainReport)> {
    train_with(corpus, cfg, hyper, &SerialGradients, |_, _| {})
}

/// [`train_toy`] with a custom gradient engine and a per-step callback
/// receiving `(step, loss)`.
pub fn train_with(
    corpus: &[Example],
    cfg: &ModelConfig,
    hyper: &TrainConfig,
    engine: &dyn GradientEngine,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(TransformerWeights, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut w = TransformerWeights::init(cfg, seed::derive(hyper.seed, "init"))?;
    let mut rng = seed::rng(seed::derive(hyper.seed, "batches"));
    let mut adam = Adam {
        m: w.zeros_like(),
        v: w.zeros_like(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut report = TrainReport::default();
    for step in 1..=hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = engine.batch_gradients(&w, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut w, &grads, hyper.learning_rate(step, cfg.d_model), hyper);
        if !w.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok((w, report))
}
