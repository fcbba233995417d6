//! Forward passes, activation traces and decoding.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{Graph, NodeId, Op, Stack, Tag};
use super::incremental::{CrossMemory, DecoderCache};
use super::weights::{AttentionIds, TransformerWeights};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Matrix;
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Sub-layer names recorded for every encoder layer, in tape order.
pub const ENCODER_LAYER_TAGS: [&str; 12] = [
    "norm1", "self.query", "self.key", "self.value", "self.attention", "self.output", "residual1",
    "norm2", "ff.in", "ff.act", "ff.out", "residual2",
];

/// Sub-layer names recorded for every decoder layer, in tape order.
pub const DECODER_LAYER_TAGS: [&str; 19] = [
    "norm1", "self.query", "self.key", "self.value", "self.attention", "self.output", "residual1",
    "norm2", "cross.query", "cross.key", "cross.value", "cross.attention", "cross.output",
    "residual2", "norm3", "ff.in", "ff.act", "ff.out", "residual3",
];

/// True for tokens the decoder may emit.
#[inline]
pub fn is_output_candidate(id: usize) -> bool {
    id != PAD as usize && id != BOS as usize
}

/// Log-softmax over the emittable tokens; padding and `<s>` get `-inf`.
pub fn output_log_probs(logits: &[f64]) -> Vec<f64> {
    let lse = math::log_sum_exp(
        logits
            .iter()
            .enumerate()
            .filter(|(i, _)| is_output_candidate(*i))
            .map(|(_, &x)| x),
    );
    logits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if is_output_candidate(i) {
                x - lse
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn check_source(w: &TransformerWeights, src: &[TokenId]) -> Result<()> {
    let cfg = w.config();
    if src.len() > cfg.max_source_len {
        return Err(Error::SourceTooLong {
            len: src.len(),
            max: cfg.max_source_len,
        });
    }
    if src.iter().all(|&t| t == PAD) {
        return Err(Error::AllPadding);
    }
    check_ids(w, src)
}

fn check_ids(w: &TransformerWeights, ids: &[TokenId]) -> Result<()> {
    let v = w.config().vocab_size;
    match ids.iter().find(|&&t| t as usize >= v) {
        Some(t) => Err(Error::InvalidArgument(alloc::format!("token id {t} outside vocabulary of {v}"))),
        None => Ok(()),
    }
}

fn attention_block(
    g: &mut Graph,
    w: &TransformerWeights,
    query_in: NodeId,
    kv_in: NodeId,
    ids: AttentionIds,
    causal: bool,
    stack: Stack,
    layer: usize,
    names: [&'static str; 5],
) -> NodeId {
    let heads = w.config().heads;
    let q = g.linear(w, query_in, ids.query, Tag::new(stack, layer, names[0]));
    let k = g.linear(w, kv_in, ids.key, Tag::new(stack, layer, names[1]));
    let v = g.linear(w, kv_in, ids.value, Tag::new(stack, layer, names[2]));
    let a = g.attention(q, k, v, heads, causal, Tag::new(stack, layer, names[3]));
    g.linear(w, a, ids.output, Tag::new(stack, layer, names[4]))
}

/// Record the encoder on `g`; returns the final (normalized) states.
pub fn encode(g: &mut Graph, w: &TransformerWeights, src: &[TokenId]) -> Result<NodeId> {
    check_source(w, src)?;
    let layout = w.layout();
    let scale = math::sqrt(w.config().d_model as f64);
    let mut x = g.embed(w, layout.source_embed, src, scale, Tag::outer(Stack::Encoder, "embed"));
    for (l, ids) in layout.encoder.iter().enumerate() {
        let t = |name| Tag::new(Stack::Encoder, l, name);
        let h = g.layer_norm(w, x, ids.norm1, t("norm1"));
        let a = attention_block(
            g,
            w,
            h,
            h,
            ids.self_attn,
            false,
            Stack::Encoder,
            l,
            ["self.query", "self.key", "self.value", "self.attention", "self.output"],
        );
        x = g.add(x, a, t("residual1"));
        let h = g.layer_norm(w, x, ids.norm2, t("norm2"));
        let f = g.linear(w, h, ids.ff_in, t("ff.in"));
        let f = g.relu(f, t("ff.act"));
        let f = g.linear(w, f, ids.ff_out, t("ff.out"));
        x = g.add(x, f, t("residual2"));
    }
    Ok(g.layer_norm(w, x, layout.encoder_norm, Tag::outer(Stack::Encoder, "norm")))
}

/// Record the decoder over `inputs` (starting with `<s>`); returns the
/// logits node, one row per input position.
pub fn decode_logits(g: &mut Graph, w: &TransformerWeights, memory: NodeId, inputs: &[TokenId]) -> NodeId {
    let layout = w.layout();
    let scale = math::sqrt(w.config().d_model as f64);
    let mut x = g.embed(w, layout.target_embed, inputs, scale, Tag::outer(Stack::Decoder, "embed"));
    for (l, ids) in layout.decoder.iter().enumerate() {
        let t = |name| Tag::new(Stack::Decoder, l, name);
        let h = g.layer_norm(w, x, ids.norm1, t("norm1"));
        let a = attention_block(
            g,
            w,
            h,
            h,
            ids.self_attn,
            true,
            Stack::Decoder,
            l,
            ["self.query", "self.key", "self.value", "self.attention", "self.output"],
        );
        x = g.add(x, a, t("residual1"));
        let h = g.layer_norm(w, x, ids.norm2, t("norm2"));
        let a = attention_block(
            g,
            w,
            h,
            memory,
            ids.cross_attn,
            false,
            Stack::Decoder,
            l,
            ["cross.query", "cross.key", "cross.value", "cross.attention", "cross.output"],
        );
        x = g.add(x, a, t("residual2"));
        let h = g.layer_norm(w, x, ids.norm3, t("norm3"));
        let f = g.linear(w, h, ids.ff_in, t("ff.in"));
        let f = g.relu(f, t("ff.act"));
        let f = g.linear(w, f, ids.ff_out, t("ff.out"));
        x = g.add(x, f, t("residual3"));
    }
    let x = g.layer_norm(w, x, layout.decoder_norm, Tag::outer(Stack::Decoder, "norm"));
    g.linear(w, x, layout.output, Tag::outer(Stack::Decoder, "logits"))
}

/// Everything recorded while force-decoding one output: the full tape plus
/// the handles relevance propagation starts from and ends at.
///
/// Decoder nodes hold one row per generation step; row `t` only depends on
/// rows `≤ t`, so row `t` is exactly the record of step `t + 1`.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub graph: Graph,
    pub source: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub source_embed: NodeId,
    pub target_embed: NodeId,
    pub logits: NodeId,
}

impl ActivationTrace {
    pub fn steps(&self) -> usize {
        self.output.len()
    }

    /// Decoder inputs: `<s>` followed by all but the last output token.
    pub fn decoder_inputs(output: &[TokenId]) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(output.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&output[..output.len().saturating_sub(1)]);
        inputs
    }

    /// Per-head attention matrices of a cross-attention layer.
    pub fn cross_attention(&self, layer: usize) -> Option<&[Matrix]> {
        let id = self.graph.find(Tag::new(Stack::Decoder, layer, "cross.attention"))?;
        match &self.graph.node(id).op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Structural completeness: every sub-layer recorded exactly once, with
    /// one row per source position (encoder) or per step (decoder), and
    /// every attention row stochastic within `1e-5`.
    pub fn validate(&self, w: &TransformerWeights) -> Result<()> {
        let cfg = w.config();
        let (n, steps) = (self.source.len(), self.steps());
        let mut expected: BTreeMap<Tag, usize> = BTreeMap::new();
        expected.insert(Tag::outer(Stack::Encoder, "embed"), n);
        expected.insert(Tag::outer(Stack::Encoder, "norm"), n);
        for l in 0..cfg.encoder_layers {
            for name in ENCODER_LAYER_TAGS {
                expected.insert(Tag::new(Stack::Encoder, l, name), n);
            }
        }
        expected.insert(Tag::outer(Stack::Decoder, "embed"), steps);
        expected.insert(Tag::outer(Stack::Decoder, "norm"), steps);
        expected.insert(Tag::outer(Stack::Decoder, "logits"), steps);
        for l in 0..cfg.decoder_layers {
            for name in DECODER_LAYER_TAGS {
                let rows = if name == "cross.key" || name == "cross.value" { n } else { steps };
                expected.insert(Tag::new(Stack::Decoder, l, name), rows);
            }
        }
        let mut seen: BTreeMap<Tag, usize> = BTreeMap::new();
        for node in self.graph.nodes() {
            *seen.entry(node.tag).or_insert(0) += 1;
            let Some(&rows) = expected.get(&node.tag) else {
                return Err(Error::InvalidArgument(alloc::format!("unexpected trace record {:?}", node.tag)));
            };
            if node.value.rows() != rows {
                return Err(Error::InvalidArgument(alloc::format!(
                    "trace record {:?} has {} rows, expected {rows}",
                    node.tag,
                    node.value.rows()
                )));
            }
            if let Op::Attention { weights, .. } = &node.op {
                for a in weights {
                    for r in 0..a.rows() {
                        let s: f64 = a.row(r).iter().sum();
                        if (s - 1.0).abs() > 1e-5 {
                            return Err(Error::InvalidArgument(alloc::format!(
                                "attention row not stochastic in {:?}: sum {s}",
                                node.tag
                            )));
                        }
                    }
                }
            }
        }
        for tag in expected.keys() {
            if seen.get(tag) != Some(&1) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "trace record {tag:?} seen {} times",
                    seen.get(tag).copied().unwrap_or(0)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    /// Emitted tokens, ending with `</s>` unless the length limit was hit.
    pub output: Vec<TokenId>,
    /// `ln p(output[t] | prefix)` for each step.
    pub step_log_probs: Vec<f64>,
    /// Sum of `step_log_probs`, no length normalization.
    pub total_log_prob: f64,
    pub trace: Option<ActivationTrace>,
}

impl DecodeResult {
    /// Total log-probability divided by output length (the beam score).
    pub fn normalized_score(&self) -> f64 {
        normalized(self.total_log_prob, self.output.len())
    }

    pub fn finished(&self) -> bool {
        self.output.last() == Some(&EOS)
    }
}

fn normalized(total: f64, len: usize) -> f64 {
    if len == 0 {
        0.0
    } else {
        total / len as f64
    }
}

/// Force-decode `output`, recording the full trace. Returns the trace and
/// per-step log-probabilities.
pub fn force_decode(w: &TransformerWeights, src: &[TokenId], output: &[TokenId]) -> Result<(ActivationTrace, Vec<f64>)> {
    if output.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_ids(w, output)?;
    let mut g = Graph::new();
    let memory = encode(&mut g, w, src)?;
    let inputs = ActivationTrace::decoder_inputs(output);
    let logits = decode_logits(&mut g, w, memory, &inputs);
    let lm = g.value(logits);
    let log_probs = output
        .iter()
        .enumerate()
        .map(|(t, &tok)| output_log_probs(lm.row(t))[tok as usize])
        .collect();
    let source_embed = NodeId(0);
    let target_embed = g
        .find(Tag::outer(Stack::Decoder, "embed"))
        .expect("decoder embedding recorded");
    Ok((
        ActivationTrace {
            graph: g,
            source: src.to_vec(),
            output: output.to_vec(),
            source_embed,
            target_embed,
            logits,
        },
        log_probs,
    ))
}

/// `Σ_t ln p(out[t] | src, out[<t])`; always `≤ 0`.
pub fn sequence_logprob(w: &TransformerWeights, src: &[TokenId], out: &[TokenId]) -> Result<f64> {
    let (_, lp) = force_decode(w, src, out)?;
    Ok(lp.iter().sum())
}

fn finish(w: &TransformerWeights, src: &[TokenId], output: Vec<TokenId>, step_log_probs: Vec<f64>, trace: bool) -> Result<DecodeResult> {
    let trace = if trace && !output.is_empty() {
        Some(force_decode(w, src, &output)?.0)
    } else {
        None
    };
    Ok(DecodeResult {
        total_log_prob: step_log_probs.iter().sum(),
        output,
        step_log_probs,
        trace,
    })
}

fn prepare(w: &TransformerWeights, src: &[TokenId]) -> Result<CrossMemory> {
    let mut g = Graph::new();
    let memory = encode(&mut g, w, src)?;
    Ok(CrossMemory::new(w, g.value(memory)))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(w: &TransformerWeights, src: &[TokenId], max_len: usize, trace: bool) -> Result<DecodeResult> {
    let memory = prepare(w, src)?;
    let mut cache = DecoderCache::new(w, max_len);
    let mut scores = Vec::new();
    let mut output = Vec::new();
    let mut lps = Vec::new();
    let mut input = BOS;
    while output.len() < max_len {
        let lp = output_log_probs(&cache.step(w, &memory, input, &mut scores));
        let (best, best_lp) = lp
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        output.push(best as TokenId);
        lps.push(best_lp);
        if best as TokenId == EOS {
            break;
        }
        input = best as TokenId;
    }
    finish(w, src, output, lps, trace)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_probs: Vec<f64>,
    total: f64,
}

#[derive(Clone, Copy, Debug)]
struct Expansion {
    parent: usize,
    token: TokenId,
    log_prob: f64,
    total: f64,
}

/// How finished beam hypotheses are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNormalization {
    /// Total log-probability divided by output length.
    #[default]
    Average,
    /// Raw total log-probability.
    None,
}

impl LengthNormalization {
    pub fn score(self, total: f64, len: usize) -> f64 {
        match self {
            LengthNormalization::Average => normalized(total, len),
            LengthNormalization::None => total,
        }
    }
}

/// Beam search with per-length averaging of the final scores.
pub fn beam_decode(w: &TransformerWeights, src: &[TokenId], beam: usize, max_len: usize, trace: bool) -> Result<DecodeResult> {
    beam_search(w, src, beam, max_len, LengthNormalization::Average, trace)
}

/// Beam search. Alive hypotheses are ranked by cumulative log-probability;
/// a hypothesis that emits `</s>` among the top `beam` expansions is
/// finished. Search stops once `beam` hypotheses are finished or at
/// `max_len` (alive hypotheses are then finished as truncated). The result
/// is the finished hypothesis with the best `norm` score, ties going to the
/// lexicographically smaller token sequence.
pub fn beam_search(
    w: &TransformerWeights,
    src: &[TokenId],
    beam: usize,
    max_len: usize,
    norm: LengthNormalization,
    trace: bool,
) -> Result<DecodeResult> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let memory = prepare(w, src)?;
    let mut scores = Vec::new();
    let mut alive = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            total: 0.0,
        },
        DecoderCache::new(w, max_len),
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions = Vec::new();
        for (parent, (hyp, cache)) in alive.iter_mut().enumerate() {
            let input = hyp.tokens.last().copied().unwrap_or(BOS);
            let lp = output_log_probs(&cache.step(w, &memory, input, &mut scores));
            for (tok, &l) in lp.iter().enumerate() {
                if is_output_candidate(tok) {
                    expansions.push(Expansion {
                        parent,
                        token: tok as TokenId,
                        log_prob: l,
                        total: hyp.total + l,
                    });
                }
            }
        }
        let extend = |e: &Expansion, alive: &[(Hypothesis, DecoderCache)]| {
            let mut h = alive[e.parent].0.clone();
            h.tokens.push(e.token);
            h.log_probs.push(e.log_prob);
            h.total = e.total;
            h
        };
        // Equal totals: the lexicographically smaller sequence first, which
        // is decided by the parent prefix, then the new token.
        expansions.sort_by(|a, b| {
            b.total
                .total_cmp(&a.total)
                .then_with(|| alive[a.parent].0.tokens.cmp(&alive[b.parent].0.tokens))
                .then(a.token.cmp(&b.token))
        });
        let mut next = Vec::with_capacity(beam);
        for (rank, e) in expansions.iter().enumerate() {
            if e.token == EOS {
                if rank < beam {
                    finished.push(extend(e, &alive));
                }
            } else if next.len() < beam {
                next.push((extend(e, &alive), alive[e.parent].1.clone()));
            }
            if rank >= beam && next.len() >= beam {
                break;
            }
        }
        alive = next;
        if finished.len() >= beam || alive.is_empty() {
            break;
        }
    }
    if finished.len() < beam {
        finished.extend(alive.into_iter().map(|(h, _)| h));
    }
    let best = finished
        .into_iter()
        .min_by(|a, b| {
            norm.score(b.total, b.tokens.len())
                .total_cmp(&norm.score(a.total, a.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .unwrap_or(Hypothesis {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            total: 0.0,
        });
    finish(w, src, best.tokens, best.log_probs, trace)
}
