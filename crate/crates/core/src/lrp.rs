//! Layer-wise relevance propagation with the αβ rule.
//!
//! Relevance flows backwards over a recorded [`Graph`]. Every operation is
//! reduced to "inputs contribute `z_i` to an output that also has a bias":
//!
//! * linear layers use `z_ij = x_i · W_ij`;
//! * layer norm is linearized with its deviation frozen, so
//!   `z_ik = x_i · g_k · inv · (δ_ik − 1/d)` and the bias is `β_k`;
//! * residual additions split by the two summands;
//! * attention uses a first-order Taylor expansion at the recorded point
//!   (`z = x · ∂y/∂x` for queries, keys and values), the remainder acting
//!   as a bias;
//! * ReLU passes relevance through unchanged.
//!
//! Relevance absorbed by biases is redistributed over the inputs in
//! proportion to their share, so each unit conserves its relevance exactly.
//! The absorbed amount is reported as `bias_leak`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::model::graph::{visible_keys, Graph, NodeId, Op, Tag};
use crate::model::{force_decode, ActivationTrace, DecodeResult, TransformerWeights};
use crate::tensor::Matrix;
use crate::vocab::{TokenId, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrpConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Longer sources keep their first `source_clip - 1` tokens plus `</s>`.
    pub source_clip: usize,
    /// Number of most recent target tokens that keep their own relevance.
    pub target_window: usize,
    pub epsilon: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            alpha: 1.0,
            beta: 0.0,
            source_clip: 40,
            target_window: 10,
            epsilon: 1e-9,
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument("alpha and beta must be non-negative and sum to 1".into()));
        }
        if self.source_clip < 2 || self.target_window == 0 {
            return Err(Error::InvalidArgument("source_clip must be at least 2 and target_window at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of distributing one output unit's relevance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnitStats {
    /// Relevance the bias terms would have absorbed before redistribution.
    pub bias_leak: f64,
    /// Units whose rule denominator vanished; these fell back to `|z|`
    /// proportions (uniform if every `z` is zero).
    pub fallback_units: usize,
}

impl UnitStats {
    fn merge(&mut self, other: UnitStats) {
        self.bias_leak += other.bias_leak;
        self.fallback_units += other.fallback_units;
    }
}

/// Distribute `rel` of one unit over inputs with contributions `z` and
/// bias `bias`, adding the shares into `out`.
pub fn distribute(z: &[f64], bias: f64, rel: f64, cfg: &LrpConfig, out: &mut [f64]) -> UnitStats {
    if rel == 0.0 || z.is_empty() {
        return UnitStats {
            bias_leak: if z.is_empty() { rel } else { 0.0 },
            fallback_units: 0,
        };
    }
    let (mut pos, mut neg) = (0.0, 0.0);
    for &v in z {
        if v > 0.0 {
            pos += v;
        } else {
            neg += v;
        }
    }
    let den_pos = pos + bias.max(0.0) + cfg.epsilon;
    let den_neg = neg + bias.min(0.0) - cfg.epsilon;
    let kept = cfg.alpha * pos / den_pos + cfg.beta * neg / den_neg;
    if kept > 0.0 && kept.is_finite() {
        let scale = rel / kept;
        let (a, b) = (cfg.alpha / den_pos, cfg.beta / den_neg);
        for (o, &v) in out.iter_mut().zip(z) {
            let share = if v > 0.0 { a * v } else { b * v };
            *o += share * scale;
        }
        return UnitStats {
            bias_leak: rel * (1.0 - kept),
            fallback_units: 0,
        };
    }
    let total: f64 = z.iter().map(|v| v.abs()).sum();
    if total > 0.0 {
        for (o, &v) in out.iter_mut().zip(z) {
            *o += rel * v.abs() / total;
        }
    } else {
        let share = rel / z.len() as f64;
        out.iter_mut().for_each(|o| *o += share);
    }
    UnitStats {
        bias_leak: rel,
        fallback_units: 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRelevance {
    pub input: Vec<f64>,
    pub stats: UnitStats,
}

/// Relevance of the inputs of `y = x · W + b` (`W` is `in × out`).
pub fn relevance_linear(input: &[f64], weight: &Matrix, bias: &[f64], out_rel: &[f64], cfg: &LrpConfig) -> Result<LinearRelevance> {
    let (n_in, n_out) = weight.shape();
    if input.len() != n_in {
        return Err(Error::DimensionMismatch {
            expected: n_in,
            got: input.len(),
        });
    }
    if out_rel.len() != n_out || bias.len() != n_out {
        return Err(Error::DimensionMismatch {
            expected: n_out,
            got: if out_rel.len() != n_out { out_rel.len() } else { bias.len() },
        });
    }
    if !out_rel.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("output relevance is not finite".into()));
    }
    let mut rel = vec![0.0; n_in];
    let mut z = vec![0.0; n_in];
    let mut stats = UnitStats::default();
    for j in 0..n_out {
        if out_rel[j] == 0.0 {
            continue;
        }
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = input[i] * weight.get(i, j);
        }
        stats.merge(distribute(&z, bias[j], out_rel[j], cfg, &mut rel));
    }
    Ok(LinearRelevance { input: rel, stats })
}

/// Relevance of the three inputs of a multi-head attention operation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRelevance {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub stats: UnitStats,
}

/// Relevance through `out_q = Σ_k A_qk · V_k` per head, with `A` the given
/// attention weights (one `queries × keys` matrix per head) computed from
/// `softmax(Q Kᵀ / √dh)`.
///
/// Each output element `(q, e)` of head `h` is linearized at the recorded
/// point: values contribute `A_qk · V_ke`, query dims `Q_qf · ∂out/∂Q_qf`,
/// key dims `K_kf · ∂out/∂K_kf`. `out − Σ z` acts as the bias.
pub fn relevance_attention(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    weights: &[Matrix],
    causal: bool,
    out_rel: &Matrix,
    cfg: &LrpConfig,
    node: usize,
) -> Result<AttentionRelevance> {
    let (nq, d) = query.shape();
    let nk = key.rows();
    let heads = weights.len();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument("attention heads must divide the width".into()));
    }
    if out_rel.shape() != (nq, d) {
        return Err(Error::DimensionMismatch {
            expected: nq * d,
            got: out_rel.rows() * out_rel.cols(),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut rq = Matrix::zeros(nq, d);
    let mut rk = Matrix::zeros(nk, d);
    let mut rv = Matrix::zeros(nk, d);
    let mut stats = UnitStats::default();
    // z layout per output element: values (n), query dims (dh), keys (n·dh).
    let mut z = vec![0.0; nk + dh + nk * dh];
    let mut share = vec![0.0; z.len()];
    let mut c = vec![0.0; nk];
    for (h, a) in weights.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for q in 0..nq {
            let n = visible_keys(q, nk, causal);
            let qrow = &query.row(q)[cols.clone()];
            for e in 0..dh {
                let rel = out_rel.get(q, h * dh + e);
                if rel == 0.0 {
                    continue;
                }
                let col = h * dh + e;
                let out: f64 = (0..n).map(|k| a.get(q, k) * value.get(k, col)).sum();
                for k in 0..n {
                    z[k] = a.get(q, k) * value.get(k, col);
                    c[k] = a.get(q, k) * (value.get(k, col) - out) * scale;
                }
                for f in 0..dh {
                    let grad: f64 = (0..n).map(|k| c[k] * key.get(k, h * dh + f)).sum();
                    z[n + f] = qrow[f] * grad;
                }
                for k in 0..n {
                    for f in 0..dh {
                        z[n + dh + k * dh + f] = key.get(k, h * dh + f) * c[k] * qrow[f];
                    }
                }
                let used = n + dh + n * dh;
                let zs = &z[..used];
                if !zs.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteAttention { node, head: h });
                }
                let bias = out - zs.iter().sum::<f64>();
                let sh = &mut share[..used];
                sh.fill(0.0);
                stats.merge(distribute(zs, bias, rel, cfg, sh));
                for k in 0..n {
                    rv.add_at(k, col, sh[k]);
                }
                for f in 0..dh {
                    rq.add_at(q, h * dh + f, sh[n + f]);
                }
                for k in 0..n {
                    for f in 0..dh {
                        rk.add_at(k, h * dh + f, sh[n + dh + k * dh + f]);
                    }
                }
            }
        }
    }
    Ok(AttentionRelevance {
        query: rq,
        key: rk,
        value: rv,
        stats,
    })
}

/// Conservation record of one graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDiagnostics {
    pub node: NodeId,
    pub tag: Tag,
    /// Total relevance that reached the node.
    pub relevance: f64,
    /// Total relevance it passed to its inputs.
    pub propagated: f64,
    pub stats: UnitStats,
}

impl NodeDiagnostics {
    pub fn conservation_error(&self) -> f64 {
        (self.relevance - self.propagated).abs()
    }
}

/// Relevance of every node reached from the seed, plus per-node records.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub relevance: Vec<Option<Matrix>>,
    pub diagnostics: Vec<NodeDiagnostics>,
}

impl Propagation {
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.relevance.get(id.0).and_then(Option::as_ref)
    }

    pub fn max_conservation_error(&self) -> f64 {
        self.diagnostics.iter().map(NodeDiagnostics::conservation_error).fold(0.0, f64::max)
    }
}

fn accumulate(slots: &mut [Option<Matrix>], id: NodeId, m: Matrix) {
    match &mut slots[id.0] {
        Some(existing) => existing.add_assign(&m),
        slot @ None => *slot = Some(m),
    }
}

fn row_is_zero(m: &Matrix, r: usize) -> bool {
    m.row(r).iter().all(|&v| v == 0.0)
}

/// Propagate `seed` (relevance of node `from`) back to the leaves.
pub fn propagate(graph: &Graph, w: &TransformerWeights, from: NodeId, seed: Matrix, cfg: &LrpConfig) -> Result<Propagation> {
    let mut slots: Vec<Option<Matrix>> = vec![None; from.0 + 1];
    slots[from.0] = Some(seed);
    let mut diagnostics = Vec::new();
    let mut z = Vec::new();
    for idx in (0..=from.0).rev() {
        let Some(r) = slots[idx].take() else {
            continue;
        };
        let node = graph.node(NodeId(idx));
        let total = r.sum();
        let mut stats = UnitStats::default();
        let mut propagated = total;
        match &node.op {
            Op::Embed { .. } => {}
            Op::Relu { input } => accumulate(&mut slots, *input, r.clone()),
            Op::Add { a, b } => {
                let (va, vb) = (graph.value(*a), graph.value(*b));
                let mut ra = Matrix::zeros(r.rows(), r.cols());
                let mut rb = Matrix::zeros(r.rows(), r.cols());
                for row in 0..r.rows() {
                    for col in 0..r.cols() {
                        let rel = r.get(row, col);
                        if rel == 0.0 {
                            continue;
                        }
                        let mut pair = [0.0; 2];
                        let zs = [va.get(row, col), vb.get(row, col)];
                        stats.merge(distribute(&zs, 0.0, rel, cfg, &mut pair));
                        ra.set(row, col, pair[0]);
                        rb.set(row, col, pair[1]);
                    }
                }
                propagated = ra.sum() + rb.sum();
                accumulate(&mut slots, *a, ra);
                accumulate(&mut slots, *b, rb);
            }
            Op::Linear { input, params } => {
                let x = graph.value(*input);
                let wm = w.get(params.weight);
                let bias = w.get(params.bias).row(0);
                let (n_in, n_out) = wm.shape();
                let mut wt = vec![0.0; n_in * n_out];
                for i in 0..n_in {
                    for j in 0..n_out {
                        wt[j * n_in + i] = wm.get(i, j);
                    }
                }
                let mut rin = Matrix::zeros(x.rows(), n_in);
                z.resize(n_in, 0.0);
                for row in 0..r.rows() {
                    if row_is_zero(&r, row) {
                        continue;
                    }
                    let xr = x.row(row);
                    let out = rin.row_mut(row);
                    for j in 0..n_out {
                        let rel = r.get(row, j);
                        if rel == 0.0 {
                            continue;
                        }
                        let col = &wt[j * n_in..(j + 1) * n_in];
                        for ((zi, &xi), &wij) in z.iter_mut().zip(xr).zip(col) {
                            *zi = xi * wij;
                        }
                        stats.merge(distribute(&z, bias[j], rel, cfg, out));
                    }
                }
                propagated = rin.sum();
                accumulate(&mut slots, *input, rin);
            }
            Op::LayerNorm { input, params, inv_std, .. } => {
                let x = graph.value(*input);
                let gain = w.get(params.gain).row(0);
                let beta = w.get(params.bias).row(0);
                let d = x.cols();
                let mut rin = Matrix::zeros(x.rows(), d);
                z.resize(d, 0.0);
                for row in 0..r.rows() {
                    if row_is_zero(&r, row) {
                        continue;
                    }
                    let xr = x.row(row);
                    let inv = inv_std[row];
                    let out = rin.row_mut(row);
                    for k in 0..d {
                        let rel = r.get(row, k);
                        if rel == 0.0 {
                            continue;
                        }
                        let coeff = gain[k] * inv;
                        for (i, zi) in z.iter_mut().enumerate() {
                            let delta = if i == k { 1.0 } else { 0.0 };
                            *zi = xr[i] * coeff * (delta - 1.0 / d as f64);
                        }
                        stats.merge(distribute(&z, beta[k], rel, cfg, out));
                    }
                }
                propagated = rin.sum();
                accumulate(&mut slots, *input, rin);
            }
            Op::Attention {
                query,
                key,
                value,
                causal,
                weights,
                ..
            } => {
                let ar = relevance_attention(
                    graph.value(*query),
                    graph.value(*key),
                    graph.value(*value),
                    weights,
                    *causal,
                    &r,
                    cfg,
                    idx,
                )?;
                stats = ar.stats;
                propagated = ar.query.sum() + ar.key.sum() + ar.value.sum();
                accumulate(&mut slots, *value, ar.value);
                accumulate(&mut slots, *key, ar.key);
                accumulate(&mut slots, *query, ar.query);
            }
        }
        diagnostics.push(NodeDiagnostics {
            node: NodeId(idx),
            tag: node.tag,
            relevance: total,
            propagated,
            stats,
        });
        slots[idx] = Some(r);
    }
    Ok(Propagation {
        relevance: slots,
        diagnostics,
    })
}

/// Relevance of one generation step, normalized so that the source and
/// prefix entries sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRelevance {
    /// `R_t(x_i)` for every source position.
    pub source: Vec<f64>,
    /// `R_t(y_j)` for `j < t`; entries outside the window are zero.
    pub prefix: Vec<f64>,
    /// Factor applied to the raw leaf relevance.
    pub normalization: f64,
    /// Raw relevance that reached the `<s>` input and was dropped.
    pub bos_mass: f64,
    /// Raw relevance of prefix tokens older than the window, folded into
    /// the in-window prefix entries.
    pub out_of_window_mass: f64,
    pub bias_leak: f64,
    pub fallback_units: usize,
    /// Largest per-node conservation error before normalization.
    pub conservation_error: f64,
}

impl StepRelevance {
    pub fn source_total(&self) -> f64 {
        self.source.iter().sum()
    }

    pub fn prefix_total(&self) -> f64 {
        self.prefix.iter().sum()
    }
}

/// Token contributions for a whole output, one record per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub steps: Vec<StepRelevance>,
    /// The source was longer than the clip and was truncated.
    pub source_clipped: bool,
    pub original_source_len: usize,
}

impl RelevanceMatrix {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn source_len(&self) -> usize {
        self.source.len()
    }

    /// Source contributions as a `steps × source` matrix.
    pub fn source_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.steps.len(), self.source.len());
        for (t, s) in self.steps.iter().enumerate() {
            m.row_mut(t).copy_from_slice(&s.source);
        }
        m
    }

    /// Largest deviation of `Σ_i R_t(x_i) + Σ_j R_t(y_j)` from one.
    pub fn identity_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| (s.source_total() + s.prefix_total() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check(&self, tolerance: f64) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            let finite = s.source.iter().chain(&s.prefix).all(|v| v.is_finite());
            if !finite || (s.source_total() + s.prefix_total() - 1.0).abs() > tolerance {
                return Err(Error::NonFiniteRelevance { step: t + 1 });
            }
        }
        Ok(())
    }
}

/// Clip `src` to `clip` tokens, keeping `</s>` last.
pub fn clip_source(src: &[TokenId], clip: usize) -> (Vec<TokenId>, bool) {
    if src.len() <= clip {
        return (src.to_vec(), false);
    }
    let mut out = src[..clip - 1].to_vec();
    out.push(EOS);
    (out, true)
}

/// Relevance of step `t` (0-based) of a recorded trace.
pub fn step_relevance(trace: &ActivationTrace, w: &TransformerWeights, t: usize, cfg: &LrpConfig) -> Result<StepRelevance> {
    let g = &trace.graph;
    let logits = g.value(trace.logits);
    let mut seed = Matrix::zeros(logits.rows(), logits.cols());
    seed.set(t, trace.output[t] as usize, 1.0);
    let prop = propagate(g, w, trace.logits, seed, cfg)?;
    let mut stats = UnitStats::default();
    for d in &prop.diagnostics {
        stats.merge(d.stats);
    }
    let n = trace.source.len();
    let source: Vec<f64> = match prop.node(trace.source_embed) {
        Some(m) => (0..n).map(|i| m.row(i).iter().sum()).collect(),
        None => vec![0.0; n],
    };
    // Decoder input row 0 is `<s>`; row j ≥ 1 is output token j - 1,
    // i.e. prefix position j - 1 of step t.
    let rows: Vec<f64> = match prop.node(trace.target_embed) {
        Some(m) => (0..=t).map(|j| m.row(j).iter().sum()).collect(),
        None => vec![0.0; t + 1],
    };
    let bos_mass = rows[0];
    let mut prefix: Vec<f64> = rows[1..].to_vec();
    let oldest_kept = t.saturating_sub(cfg.target_window);
    let out_of_window_mass: f64 = prefix[..oldest_kept].iter().sum();
    if oldest_kept > 0 {
        prefix[..oldest_kept].fill(0.0);
        let kept = &mut prefix[oldest_kept..];
        let kept_total: f64 = kept.iter().sum();
        if kept_total > 0.0 {
            let scale = 1.0 + out_of_window_mass / kept_total;
            kept.iter_mut().for_each(|v| *v *= scale);
        } else {
            let share = out_of_window_mass / kept.len() as f64;
            kept.iter_mut().for_each(|v| *v = share);
        }
    }
    let mut source = source;
    let total: f64 = source.iter().sum::<f64>() + prefix.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFiniteRelevance { step: t + 1 });
    }
    if total <= 0.0 {
        return Err(Error::DegenerateStep { step: t + 1 });
    }
    let normalization = 1.0 / total;
    source.iter_mut().for_each(|v| *v *= normalization);
    prefix.iter_mut().for_each(|v| *v *= normalization);
    Ok(StepRelevance {
        source,
        prefix,
        normalization,
        bos_mass,
        out_of_window_mass,
        bias_leak: stats.bias_leak,
        fallback_units: stats.fallback_units,
        conservation_error: prop.max_conservation_error(),
    })
}

fn from_trace(trace: &ActivationTrace, w: &TransformerWeights, cfg: &LrpConfig, clipped: bool, original_len: usize) -> Result<RelevanceMatrix> {
    let steps = (0..trace.steps())
        .map(|t| step_relevance(trace, w, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(RelevanceMatrix {
        source: trace.source.clone(),
        output: trace.output.clone(),
        steps,
        source_clipped: clipped,
        original_source_len: original_len,
    })
}

/// Token contributions of `out` given `src`, by force-decoding `out`.
/// `src` ends with `</s>`; `out` is the emitted sequence.
pub fn token_contributions(src: &[TokenId], out: &[TokenId], w: &TransformerWeights, cfg: &LrpConfig) -> Result<RelevanceMatrix> {
    cfg.validate()?;
    let (clipped_src, clipped) = clip_source(src, cfg.source_clip);
    let (trace, _) = force_decode(w, &clipped_src, out)?;
    from_trace(&trace, w, cfg, clipped, src.len())
}

/// Token contributions from a decode result that kept its trace.
pub fn contributions_from_decode(result: &DecodeResult, w: &TransformerWeights, cfg: &LrpConfig) -> Result<RelevanceMatrix> {
    cfg.validate()?;
    let trace = result.trace.as_ref().ok_or(Error::TraceRequired)?;
    if trace.source.len() > cfg.source_clip {
        return token_contributions(&trace.source, &trace.output, w, cfg);
    }
    from_trace(trace, w, cfg, false, trace.source.len())
}

/// Contributions read off cross-attention: step `t`'s source entries are
/// the head-averaged attention weights of decoder layer `layer` (the last
/// one when `None`). Prefix entries are zero.
pub fn attention_contributions(
    src: &[TokenId],
    out: &[TokenId],
    w: &TransformerWeights,
    layer: Option<usize>,
    source_clip: usize,
) -> Result<RelevanceMatrix> {
    let layers = w.config().decoder_layers;
    let layer = layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(Error::InvalidArgument(alloc::format!("decoder layer {layer} out of range")));
    }
    let (clipped_src, clipped) = clip_source(src, source_clip.max(2));
    let (trace, _) = force_decode(w, &clipped_src, out)?;
    let heads = trace.cross_attention(layer).ok_or(Error::TraceRequired)?;
    let n = clipped_src.len();
    let mut steps = Vec::with_capacity(out.len());
    for t in 0..out.len() {
        let mut source = vec![0.0; n];
        for a in heads {
            for (s, &v) in source.iter_mut().zip(a.row(t)) {
                *s += v / heads.len() as f64;
            }
        }
        if !source.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteAttention {
                node: layer,
                head: 0,
            });
        }
        steps.push(StepRelevance {
            source,
            prefix: vec![0.0; t],
            normalization: 1.0,
            bos_mass: 0.0,
            out_of_window_mass: 0.0,
            bias_leak: 0.0,
            fallback_units: 0,
            conservation_error: 0.0,
        });
    }
    Ok(RelevanceMatrix {
        source: clipped_src,
        output: out.to_vec(),
        steps,
        source_clipped: clipped,
        original_source_len: src.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{greedy_decode, ModelConfig};

    fn cfg() -> LrpConfig {
        LrpConfig::default()
    }

    fn tiny() -> TransformerWeights {
        let cfg = ModelConfig {
            vocab_size: 10,
            encoder_layers: 1,
            decoder_layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            max_source_len: 32,
            max_target_len: 32,
            label_smoothing: 0.1,
        };
        TransformerWeights::init(&cfg, 11).unwrap()
    }

    #[test]
    fn linear_hand_example() {
        let w = Matrix::from_vec(2, 1, vec![0.5, 0.5]);
        let r = relevance_linear(&[2.0, 3.0], &w, &[0.0], &[1.0], &cfg()).unwrap();
        assert!((r.input[0] - 0.4).abs() < 1e-9);
        assert!((r.input[1] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn linear_zero_relevance_and_single_input() {
        let w = Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]);
        let r = relevance_linear(&[1.0, -2.0], &w, &[0.1, 0.2], &[0.0, 0.0], &cfg()).unwrap();
        assert_eq!(r.input, vec![0.0, 0.0]);
        let w1 = Matrix::from_vec(1, 2, vec![0.5, -3.0]);
        let r = relevance_linear(&[2.0], &w1, &[0.7, -0.2], &[0.3, 0.9], &cfg()).unwrap();
        assert!((r.input[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn bias_mass_is_redistributed_and_reported() {
        let w = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let r = relevance_linear(&[1.0, 3.0], &w, &[4.0], &[2.0], &cfg()).unwrap();
        assert!((r.input[0] - 0.5).abs() < 1e-9);
        assert!((r.input[1] - 1.5).abs() < 1e-9);
        assert!((r.stats.bias_leak - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dead_unit_falls_back_and_is_flagged() {
        let w = Matrix::from_vec(2, 1, vec![-1.0, -1.0]);
        let r = relevance_linear(&[1.0, 3.0], &w, &[0.0], &[1.0], &cfg()).unwrap();
        assert_eq!(r.stats.fallback_units, 1);
        assert!((r.input[0] - 0.25).abs() < 1e-12);
        let r = relevance_linear(&[0.0, 0.0], &w, &[0.0], &[1.0], &cfg()).unwrap();
        assert_eq!(r.input, vec![0.5, 0.5]);
    }

    #[test]
    fn positive_scaling_leaves_shares_unchanged() {
        let z = [0.3, -0.2, 1.1, 0.0, 2.5];
        let mut a = vec![0.0; 5];
        distribute(&z, 0.0, 1.0, &cfg(), &mut a);
        let scaled: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v * 7.5 } else { v }).collect();
        let mut b = vec![0.0; 5];
        distribute(&scaled, 0.0, 1.0, &cfg(), &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_attention_routes_value_relevance() {
        let q = Matrix::from_rows(&[&[0.3, -0.1]]);
        let k = Matrix::from_rows(&[&[1.0, 0.2], &[0.4, 0.5], &[-0.3, 0.9]]);
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 1.0], &[0.5, 0.5]]);
        let a = Matrix::from_rows(&[&[0.0, 1.0, 0.0]]);
        let out_rel = Matrix::from_rows(&[&[0.6, 0.4]]);
        let r = relevance_attention(&q, &k, &v, &[a], false, &out_rel, &cfg(), 0).unwrap();
        assert_eq!(r.query.sum(), 0.0);
        assert_eq!(r.key.sum(), 0.0);
        assert!((r.value.get(1, 0) - 0.6).abs() < 1e-12);
        assert!((r.value.get(1, 1) - 0.4).abs() < 1e-12);
        assert_eq!(r.value.get(0, 0) + r.value.get(2, 0), 0.0);
    }

    #[test]
    fn uniform_attention_over_identical_values_splits_equally() {
        let q = Matrix::from_rows(&[&[0.3, -0.1]]);
        let k = Matrix::from_rows(&[&[1.0, 0.2], &[0.4, 0.5]]);
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let a = Matrix::from_rows(&[&[0.5, 0.5]]);
        let out_rel = Matrix::from_rows(&[&[1.0, 1.0]]);
        let r = relevance_attention(&q, &k, &v, &[a], false, &out_rel, &cfg(), 0).unwrap();
        for c in 0..2 {
            assert!((r.value.get(0, c) - 0.5).abs() < 1e-12);
            assert!((r.value.get(1, c) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn contributions_satisfy_the_identity() {
        let w = tiny();
        for src in [vec![4, 5, 6, 7, EOS], vec![9, EOS], vec![4, 4, 8, 5, 6, 9, 7, EOS]] {
            let out = greedy_decode(&w, &src, 7, true).unwrap();
            let r = contributions_from_decode(&out, &w, &cfg()).unwrap();
            assert_eq!(r.len(), out.output.len());
            assert!(r.identity_error() < 1e-9);
            assert!((r.steps[0].source_total() - 1.0).abs() < 1e-12);
            for s in &r.steps {
                assert!(s.source.iter().chain(&s.prefix).all(|&v| v >= 0.0));
                assert!(s.conservation_error < 1e-9, "{}", s.conservation_error);
            }
            let again = token_contributions(&src, &out.output, &w, &cfg()).unwrap();
            assert_eq!(again, r);
        }
    }

    #[test]
    fn prefix_window_folds_old_mass() {
        let w = tiny();
        let src = [4, 5, 6, EOS];
        let out = [7, 8, 9, 4, 5, EOS];
        let narrow = LrpConfig {
            target_window: 2,
            ..cfg()
        };
        let r = token_contributions(&src, &out, &w, &narrow).unwrap();
        assert!(r.identity_error() < 1e-9);
        let last = r.steps.last().unwrap();
        assert_eq!(last.prefix.len(), 5);
        assert!(last.prefix[..3].iter().all(|&v| v == 0.0));
        assert!(last.out_of_window_mass > 0.0);
    }

    #[test]
    fn long_sources_are_clipped() {
        let w = tiny();
        let src: Vec<TokenId> = (0..12).map(|i| 4 + (i % 5)).chain([EOS]).collect();
        let c = LrpConfig {
            source_clip: 6,
            ..cfg()
        };
        let r = token_contributions(&src, &[5, EOS], &w, &c).unwrap();
        assert!(r.source_clipped);
        assert_eq!(r.source_len(), 6);
        assert_eq!(*r.source.last().unwrap(), EOS);
        assert_eq!(r.original_source_len, 13);
    }

    #[test]
    fn trace_required() {
        let w = tiny();
        let out = greedy_decode(&w, &[4, EOS], 3, false).unwrap();
        assert!(matches!(contributions_from_decode(&out, &w, &cfg()), Err(Error::TraceRequired)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let w = tiny();
        let r = attention_contributions(&[4, 5, 6, EOS], &[7, 8, EOS], &w, None, 40).unwrap();
        for s in &r.steps {
            assert!((s.source_total() - 1.0).abs() < 1e-9);
        }
        assert!(r.identity_error() < 1e-9);
        let one = attention_contributions(&[EOS], &[7, EOS], &w, Some(0), 40).unwrap();
        assert!(one.steps.iter().all(|s| (s.source[0] - 1.0).abs() < 1e-12));
    }
}
