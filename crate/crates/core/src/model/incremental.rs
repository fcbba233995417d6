//! Row-at-a-time decoder with a key/value cache. The arithmetic mirrors the
//! recording tape operation for operation, so a cached step reproduces the
//! corresponding force-decoded row.

use alloc::vec;
use alloc::vec::Vec;

use super::graph::{positional_encoding, LAYER_NORM_EPS};
use super::weights::{LinearIds, NormIds, TransformerWeights};
use crate::math;
use crate::tensor::{dot, Matrix};
use crate::vocab::TokenId;

fn linear_row(w: &TransformerWeights, x: &[f64], ids: LinearIds) -> Vec<f64> {
    let m = w.get(ids.weight);
    let cols = m.cols();
    let mut out = vec![0.0; cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &wkj) in out.iter_mut().zip(m.row(k)) {
            *o += xk * wkj;
        }
    }
    for (o, &b) in out.iter_mut().zip(w.get(ids.bias).row(0)) {
        *o += b;
    }
    out
}

fn layer_norm_row(w: &TransformerWeights, x: &[f64], ids: NormIds) -> Vec<f64> {
    let d = x.len();
    let gain = w.get(ids.gain).row(0);
    let bias = w.get(ids.bias).row(0);
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
    (0..d).map(|k| gain[k] * (x[k] - mean) * inv + bias[k]).collect()
}

/// One query row against all cached key/value rows.
fn attend(q: &[f64], keys: &Matrix, values: &Matrix, n: usize, heads: usize, scores: &mut Vec<f64>) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut out = vec![0.0; d];
    scores.resize(n, 0.0);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qi = &q[cols.clone()];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            scores[j] = dot(qi, &keys.row(j)[cols.clone()]) * scale;
            max = max.max(scores[j]);
        }
        let mut z = 0.0;
        for s in scores.iter_mut().take(n) {
            *s = math::exp(*s - max);
            z += *s;
        }
        let orow = &mut out[cols.clone()];
        for j in 0..n {
            let aij = scores[j] / z;
            for (o, &vj) in orow.iter_mut().zip(&values.row(j)[cols.clone()]) {
                *o += aij * vj;
            }
        }
    }
    out
}

fn add(x: &mut [f64], y: &[f64]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Projected encoder memory, shared by every hypothesis of one source.
#[derive(Clone, Debug)]
pub(crate) struct CrossMemory {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl CrossMemory {
    pub(crate) fn new(w: &TransformerWeights, memory: &Matrix) -> Self {
        let layout = w.layout();
        let project = |ids: LinearIds| {
            let mut m = memory.matmul(w.get(ids.weight));
            let b = w.get(ids.bias).row(0);
            for r in 0..m.rows() {
                add(m.row_mut(r), b);
            }
            m
        };
        CrossMemory {
            keys: layout.decoder.iter().map(|l| project(l.cross_attn.key)).collect(),
            values: layout.decoder.iter().map(|l| project(l.cross_attn.value)).collect(),
        }
    }
}

/// Self-attention keys and values of the rows decoded so far.
#[derive(Clone, Debug)]
pub(crate) struct DecoderCache {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl DecoderCache {
    pub(crate) fn new(w: &TransformerWeights, capacity: usize) -> Self {
        let cfg = w.config();
        let fresh = || (0..cfg.decoder_layers).map(|_| Matrix::zeros(capacity, cfg.d_model)).collect();
        DecoderCache {
            keys: fresh(),
            values: fresh(),
            len: 0,
        }
    }

    /// Feed the next decoder input; returns that row's logits.
    pub(crate) fn step(&mut self, w: &TransformerWeights, memory: &CrossMemory, token: TokenId, scores: &mut Vec<f64>) -> Vec<f64> {
        let cfg = w.config();
        let layout = w.layout();
        let (d, heads) = (cfg.d_model, cfg.heads);
        let pos = self.len;
        let scale = math::sqrt(d as f64);
        let mut x = vec![0.0; d];
        positional_encoding(pos, d, &mut x);
        for (o, &e) in x.iter_mut().zip(w.get(layout.target_embed).row(token as usize)) {
            *o += e * scale;
        }
        for (l, ids) in layout.decoder.iter().enumerate() {
            let h = layer_norm_row(w, &x, ids.norm1);
            let q = linear_row(w, &h, ids.self_attn.query);
            self.keys[l].row_mut(pos).copy_from_slice(&linear_row(w, &h, ids.self_attn.key));
            self.values[l].row_mut(pos).copy_from_slice(&linear_row(w, &h, ids.self_attn.value));
            let a = attend(&q, &self.keys[l], &self.values[l], pos + 1, heads, scores);
            add(&mut x, &linear_row(w, &a, ids.self_attn.output));
            let h = layer_norm_row(w, &x, ids.norm2);
            let q = linear_row(w, &h, ids.cross_attn.query);
            let n = memory.keys[l].rows();
            let a = attend(&q, &memory.keys[l], &memory.values[l], n, heads, scores);
            add(&mut x, &linear_row(w, &a, ids.cross_attn.output));
            let h = layer_norm_row(w, &x, ids.norm3);
            let mut f = linear_row(w, &h, ids.ff_in);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            add(&mut x, &linear_row(w, &f, ids.ff_out));
        }
        let h = layer_norm_row(w, &x, layout.decoder_norm);
        self.len += 1;
        linear_row(w, &h, layout.output)
    }
}
