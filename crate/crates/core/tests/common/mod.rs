//! Reference implementations used as test oracles. They share no code with
//! the library beyond reading named weight tensors: the model is rebuilt as
//! a graph of scalars, every attention derivative is cross-checked against
//! a central finite difference, and relevance is distributed scalar by
//! scalar.

#![allow(dead_code)]

use hallucheck_core::model::{ModelConfig, TransformerWeights};
use hallucheck_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// One encoder layer, one decoder layer, width 2, one head, vocabulary of
/// the four reserved tokens plus three words. Every tensor (biases and
/// norm parameters included) is random.
pub fn micro_model(seed: u64) -> TransformerWeights {
    let cfg = ModelConfig {
        vocab_size: 7,
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 2,
        heads: 1,
        d_ff: 3,
        max_source_len: 16,
        max_target_len: 16,
        label_smoothing: 0.1,
    };
    randomized(&cfg, seed)
}

pub fn randomized(cfg: &ModelConfig, seed: u64) -> TransformerWeights {
    let mut w = TransformerWeights::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = w.names().to_vec();
    for (name, t) in names.iter().zip(w.tensors_mut()) {
        for v in t.data_mut() {
            *v = if name.ends_with(".gain") {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-1.0..1.0)
            };
        }
    }
    w
}

pub fn tensor<'a>(w: &'a TransformerWeights, name: &str) -> &'a Matrix {
    let i = w.names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no tensor {name}"));
    &w.tensors()[i]
}

#[derive(Clone, Debug)]
struct Scalar {
    value: f64,
    /// (input scalar, contribution z)
    inputs: Vec<(usize, f64)>,
    bias: f64,
}

/// A forward pass recorded scalar by scalar.
#[derive(Default)]
pub struct ScalarGraph {
    nodes: Vec<Scalar>,
}

type Vector = Vec<usize>;
type Rows = Vec<Vector>;

impl ScalarGraph {
    pub fn value(&self, id: usize) -> f64 {
        self.nodes[id].value
    }

    fn push(&mut self, value: f64, inputs: Vec<(usize, f64)>, bias: f64) -> usize {
        self.nodes.push(Scalar { value, inputs, bias });
        self.nodes.len() - 1
    }

    fn leaf(&mut self, value: f64) -> usize {
        self.push(value, Vec::new(), 0.0)
    }

    fn linear(&mut self, x: &[usize], w: &Matrix, b: &Matrix) -> Vector {
        (0..w.cols())
            .map(|j| {
                let inputs: Vec<(usize, f64)> = x.iter().enumerate().map(|(i, &id)| (id, self.value(id) * w.get(i, j))).collect();
                let value = inputs.iter().map(|(_, z)| z).sum::<f64>() + b.get(0, j);
                self.push(value, inputs, b.get(0, j))
            })
            .collect()
    }

    fn layer_norm(&mut self, x: &[usize], gain: &Matrix, beta: &Matrix) -> Vector {
        let d = x.len() as f64;
        let xs: Vec<f64> = x.iter().map(|&i| self.value(i)).collect();
        let mean = xs.iter().sum::<f64>() / d;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-6).sqrt();
        (0..x.len())
            .map(|k| {
                let g = gain.get(0, k);
                let value = g * (xs[k] - mean) * inv + beta.get(0, k);
                let inputs = x
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        let delta = if i == k { 1.0 } else { 0.0 };
                        (id, xs[i] * g * inv * (delta - 1.0 / d))
                    })
                    .collect();
                self.push(value, inputs, beta.get(0, k))
            })
            .collect()
    }

    fn relu(&mut self, x: &[usize]) -> Vector {
        x.iter()
            .map(|&id| {
                let v = self.value(id).max(0.0);
                self.push(v, vec![(id, v)], 0.0)
            })
            .collect()
    }

    fn add(&mut self, a: &[usize], b: &[usize]) -> Vector {
        a.iter()
            .zip(b)
            .map(|(&i, &j)| {
                let (va, vb) = (self.value(i), self.value(j));
                self.push(va + vb, vec![(i, va), (j, vb)], 0.0)
            })
            .collect()
    }

    fn linear_rows(&mut self, x: &Rows, w: &TransformerWeights, prefix: &str) -> Rows {
        let (wm, b) = (tensor(w, &format!("{prefix}.weight")).clone(), tensor(w, &format!("{prefix}.bias")).clone());
        x.iter().map(|r| self.linear(r, &wm, &b)).collect()
    }

    fn norm_rows(&mut self, x: &Rows, w: &TransformerWeights, prefix: &str) -> Rows {
        let (g, b) = (tensor(w, &format!("{prefix}.gain")).clone(), tensor(w, &format!("{prefix}.bias")).clone());
        x.iter().map(|r| self.layer_norm(r, &g, &b)).collect()
    }

    /// Attention output `(q, e)` of one head as a function of raw values.
    fn head_output(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], qi: usize, visible: usize, cols: std::ops::Range<usize>, e: usize) -> f64 {
        let dh = cols.len() as f64;
        let scores: Vec<f64> = (0..visible)
            .map(|j| cols.clone().map(|c| q[qi][c] * k[j][c]).sum::<f64>() / dh.sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        (0..visible).map(|j| exps[j] / z * v[j][e]).sum()
    }

    /// Multi-head attention; each output is linearized with finite
    /// differences and the remainder is its bias.
    pub fn attention(&mut self, q: &Rows, k: &Rows, v: &Rows, heads: usize, causal: bool) -> Rows {
        let vals = |rows: &Rows, g: &ScalarGraph| -> Vec<Vec<f64>> { rows.iter().map(|r| r.iter().map(|&i| g.value(i)).collect()).collect() };
        let (qv, kv, vv) = (vals(q, self), vals(k, self), vals(v, self));
        let d = qv[0].len();
        let dh = d / heads;
        let h = 1e-4;
        let scale = (dh as f64).sqrt();
        let mut out = Vec::new();
        for qi in 0..q.len() {
            let visible = if causal { (qi + 1).min(k.len()) } else { k.len() };
            let mut row = Vec::new();
            for e in 0..d {
                let head = e / dh;
                let cols = head * dh..(head + 1) * dh;
                let value = Self::head_output(&qv, &kv, &vv, qi, visible, cols.clone(), e);
                // A_qk from the scores, used for the value path.
                let weights: Vec<f64> = (0..visible)
                    .map(|j| {
                        let mut onehot = vec![vec![0.0; d]; visible];
                        onehot[j][e] = 1.0;
                        Self::head_output(&qv, &kv, &onehot, qi, visible, cols.clone(), e)
                    })
                    .collect();
                let mut inputs = Vec::new();
                for j in 0..visible {
                    inputs.push((v[j][e], weights[j] * vv[j][e]));
                }
                for c in cols.clone() {
                    // d out / d s_j = A_j (V_je - out); d s_j / d Q_c = K_jc / sqrt(dh)
                    let grad: f64 = (0..visible).map(|j| weights[j] * (vv[j][e] - value) * kv[j][c]).sum::<f64>() / scale;
                    check_derivative(grad, h, |d| {
                        let mut shifted = qv.clone();
                        shifted[qi][c] += d;
                        Self::head_output(&shifted, &kv, &vv, qi, visible, cols.clone(), e)
                    });
                    inputs.push((q[qi][c], qv[qi][c] * grad));
                }
                for j in 0..visible {
                    for c in cols.clone() {
                        let grad = weights[j] * (vv[j][e] - value) * qv[qi][c] / scale;
                        check_derivative(grad, h, |d| {
                            let mut shifted = kv.clone();
                            shifted[j][c] += d;
                            Self::head_output(&qv, &shifted, &vv, qi, visible, cols.clone(), e)
                        });
                        inputs.push((k[j][c], kv[j][c] * grad));
                    }
                }
                let bias = value - inputs.iter().map(|(_, z)| z).sum::<f64>();
                row.push(self.push(value, inputs, bias));
            }
            out.push(row);
        }
        out
    }
}

/// Compare an analytic derivative with a five-point central difference.
fn check_derivative(analytic: f64, h: f64, f: impl Fn(f64) -> f64) {
    let numeric = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
    let err = (analytic - numeric).abs();
    assert!(err <= 1e-7 * (1.0 + analytic.abs()), "derivative {analytic} vs difference {numeric}");
}

fn positional(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = pos as f64 / 10_000f64.powf(2.0 * (i / 2) as f64 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// The recorded forward pass of one (source, output) pair.
pub struct OracleTrace {
    pub graph: ScalarGraph,
    pub source: Rows,
    pub target: Rows,
    pub logits: Rows,
}

fn embed(g: &mut ScalarGraph, w: &TransformerWeights, table: &str, ids: &[u32]) -> Rows {
    let t = tensor(w, table);
    let d = t.cols();
    let scale = (d as f64).sqrt();
    ids.iter()
        .enumerate()
        .map(|(p, &id)| {
            let pe = positional(p, d);
            (0..d).map(|c| g.leaf(pe[c] + t.get(id as usize, c) * scale)).collect()
        })
        .collect()
}

fn add_rows(g: &mut ScalarGraph, a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| g.add(x, y)).collect()
}

fn block(g: &mut ScalarGraph, w: &TransformerWeights, qin: &Rows, kvin: &Rows, prefix: &str, causal: bool) -> Rows {
    let heads = w.config().heads;
    let q = g.linear_rows(qin, w, &format!("{prefix}.query"));
    let k = g.linear_rows(kvin, w, &format!("{prefix}.key"));
    let v = g.linear_rows(kvin, w, &format!("{prefix}.value"));
    let a = g.attention(&q, &k, &v, heads, causal);
    g.linear_rows(&a, w, &format!("{prefix}.output"))
}

fn feed_forward(g: &mut ScalarGraph, w: &TransformerWeights, x: &Rows, prefix: &str) -> Rows {
    let f = g.linear_rows(x, w, &format!("{prefix}.ff_in"));
    let f: Rows = f.iter().map(|r| g.relu(r)).collect();
    g.linear_rows(&f, w, &format!("{prefix}.ff_out"))
}

pub fn forward(w: &TransformerWeights, src: &[u32], out: &[u32]) -> OracleTrace {
    let cfg = w.config().clone();
    let mut g = ScalarGraph::default();
    let source = embed(&mut g, w, "source.embed", src);
    let mut x = source.clone();
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        let h = g.norm_rows(&x, w, &format!("{p}.norm1"));
        let a = block(&mut g, w, &h, &h, &format!("{p}.self_attn"), false);
        x = add_rows(&mut g, &x, &a);
        let h = g.norm_rows(&x, w, &format!("{p}.norm2"));
        let f = feed_forward(&mut g, w, &h, &p);
        x = add_rows(&mut g, &x, &f);
    }
    let memory = g.norm_rows(&x, w, "encoder.norm");
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(&out[..out.len() - 1]);
    let target = embed(&mut g, w, "target.embed", &inputs);
    let mut y = target.clone();
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        let h = g.norm_rows(&y, w, &format!("{p}.norm1"));
        let a = block(&mut g, w, &h, &h, &format!("{p}.self_attn"), true);
        y = add_rows(&mut g, &y, &a);
        let h = g.norm_rows(&y, w, &format!("{p}.norm2"));
        let a = block(&mut g, w, &h, &memory, &format!("{p}.cross_attn"), false);
        y = add_rows(&mut g, &y, &a);
        let h = g.norm_rows(&y, w, &format!("{p}.norm3"));
        let f = feed_forward(&mut g, w, &h, &p);
        y = add_rows(&mut g, &y, &f);
    }
    let h = g.norm_rows(&y, w, "decoder.norm");
    let logits = g.linear_rows(&h, w, "output");
    OracleTrace {
        graph: g,
        source,
        target,
        logits,
    }
}

/// Log-probabilities of the emitted tokens, with `<pad>` and `<s>`
/// excluded from the softmax.
pub fn step_log_probs(trace: &OracleTrace, out: &[u32]) -> Vec<f64> {
    out.iter()
        .enumerate()
        .map(|(t, &tok)| {
            let logits: Vec<f64> = trace.logits[t].iter().map(|&i| trace.graph.value(i)).collect();
            let allowed: Vec<f64> = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD as usize && *i != BOS as usize)
                .map(|(_, &v)| v)
                .collect();
            let max = allowed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + allowed.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            logits[tok as usize] - lse
        })
        .collect()
}

/// αβ distribution of one scalar with bias redistribution and the
/// `|z|`/uniform fallback.
fn distribute(z: &[f64], bias: f64, rel: f64, alpha: f64, beta: f64, eps: f64) -> Vec<f64> {
    if rel == 0.0 {
        return vec![0.0; z.len()];
    }
    let pos: f64 = z.iter().filter(|&&v| v > 0.0).sum();
    let neg: f64 = z.iter().filter(|&&v| v <= 0.0).sum();
    let dp = pos + bias.max(0.0) + eps;
    let dn = neg + bias.min(0.0) - eps;
    let v: Vec<f64> = z.iter().map(|&x| if x > 0.0 { alpha * x / dp } else { beta * x / dn }).collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        return v.iter().map(|x| rel * x / total).collect();
    }
    let abs: f64 = z.iter().map(|x| x.abs()).sum();
    if abs > 0.0 {
        z.iter().map(|x| rel * x.abs() / abs).collect()
    } else {
        vec![rel / z.len() as f64; z.len()]
    }
}

/// Per-step (source, prefix) contributions, normalized to sum to one after
/// dropping `<s>` and folding prefix mass older than `window`. `Err(t)`
/// when nothing reaches the tokens at 1-based step `t`.
pub fn contributions(w: &TransformerWeights, src: &[u32], out: &[u32], window: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>, usize> {
    let trace = forward(w, src, out);
    let g = &trace.graph;
    let mut result = Vec::new();
    for (t, &tok) in out.iter().enumerate() {
        let mut rel = vec![0.0; g.nodes.len()];
        rel[trace.logits[t][tok as usize]] = 1.0;
        for id in (0..g.nodes.len()).rev() {
            let node = &g.nodes[id];
            if node.inputs.is_empty() || rel[id] == 0.0 {
                continue;
            }
            let z: Vec<f64> = node.inputs.iter().map(|(_, z)| *z).collect();
            let shares = distribute(&z, node.bias, rel[id], 1.0, 0.0, 1e-9);
            for ((input, _), s) in node.inputs.iter().zip(shares) {
                rel[*input] += s;
            }
        }
        let row_sum = |r: &Vec<usize>| r.iter().map(|&i| rel[i]).sum::<f64>();
        let mut source: Vec<f64> = trace.source.iter().map(row_sum).collect();
        let mut prefix: Vec<f64> = trace.target[1..=t].iter().map(row_sum).collect();
        let old = t.saturating_sub(window);
        let folded: f64 = prefix[..old].iter().sum();
        if old > 0 {
            let kept: f64 = prefix[old..].iter().sum();
            let n = (t - old) as f64;
            for (j, p) in prefix.iter_mut().enumerate() {
                *p = if j < old {
                    0.0
                } else if kept > 0.0 {
                    *p * (1.0 + folded / kept)
                } else {
                    folded / n
                };
            }
        }
        let total: f64 = source.iter().sum::<f64>() + prefix.iter().sum::<f64>();
        if total <= 0.0 {
            return Err(t + 1);
        }
        source.iter_mut().for_each(|v| *v /= total);
        prefix.iter_mut().for_each(|v| *v /= total);
        result.push((source, prefix));
    }
    Ok(result)
}
