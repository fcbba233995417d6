//! Recording tape for the Transformer forward pass.
//!
//! Every sub-layer appends one [`Node`] holding its output and the cached
//! quantities its backward rules need. The same tape serves gradient
//! back-propagation during training and relevance propagation in
//! [`crate::lrp`]; node ids are topologically ordered by construction.

use alloc::vec;
use alloc::vec::Vec;

use super::weights::{LinearIds, NormIds, ParamId, TransformerWeights};
use crate::math;
use crate::tensor::{dot, Matrix};
use crate::vocab::TokenId;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Which sub-layer a node records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tag {
    pub stack: Stack,
    /// Layer index; `usize::MAX` for embeddings, final norms and logits.
    pub layer: usize,
    pub name: &'static str,
}

impl Tag {
    pub const fn new(stack: Stack, layer: usize, name: &'static str) -> Self {
        Tag { stack, layer, name }
    }

    pub const fn outer(stack: Stack, name: &'static str) -> Self {
        Tag {
            stack,
            layer: usize::MAX,
            name,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// `table[id] · scale + positional(row)`; a leaf.
    Embed {
        table: ParamId,
        ids: Vec<TokenId>,
        scale: f64,
    },
    /// `x · W + b`.
    Linear { input: NodeId, params: LinearIds },
    /// Row-wise layer norm; caches the row means and inverse deviations.
    LayerNorm {
        input: NodeId,
        params: NormIds,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Multi-head scaled dot-product attention over pre-projected inputs.
    /// `weights[h]` is the `(queries × keys)` attention matrix of head `h`.
    Attention {
        query: NodeId,
        key: NodeId,
        value: NodeId,
        heads: usize,
        causal: bool,
        weights: Vec<Matrix>,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Matrix,
    pub tag: Tag,
}

/// Sinusoidal position encoding for one position.
pub fn positional_encoding(pos: usize, d: usize, out: &mut [f64]) {
    for i in 0..d {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / math::powf(10_000.0, 2.0 * pair / d as f64);
        out[i] = if i % 2 == 0 {
            math::sin(angle)
        } else {
            math::cos(angle)
        };
    }
}

/// Keys visible to query `i`.
#[inline]
pub fn visible_keys(i: usize, n_keys: usize, causal: bool) -> usize {
    if causal {
        (i + 1).min(n_keys)
    } else {
        n_keys
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn find(&self, tag: Tag) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.tag == tag).map(NodeId)
    }

    fn push(&mut self, op: Op, value: Matrix, tag: Tag) -> NodeId {
        self.nodes.push(Node { op, value, tag });
        NodeId(self.nodes.len() - 1)
    }

    pub fn embed(
        &mut self,
        w: &TransformerWeights,
        table: ParamId,
        ids: &[TokenId],
        scale: f64,
        tag: Tag,
    ) -> NodeId {
        let t = w.get(table);
        let d = t.cols();
        let mut out = Matrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            let row = out.row_mut(r);
            positional_encoding(r, d, row);
            for (o, &e) in row.iter_mut().zip(t.row(id as usize)) {
                *o += e * scale;
            }
        }
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
            out,
            tag,
        )
    }

    pub fn linear(&mut self, w: &TransformerWeights, input: NodeId, params: LinearIds, tag: Tag) -> NodeId {
        let mut out = self.value(input).matmul(w.get(params.weight));
        let b = w.get(params.bias).row(0);
        for r in 0..out.rows() {
            for (o, &bj) in out.row_mut(r).iter_mut().zip(b) {
                *o += bj;
            }
        }
        self.push(Op::Linear { input, params }, out, tag)
    }

    pub fn layer_norm(&mut self, w: &TransformerWeights, input: NodeId, params: NormIds, tag: Tag) -> NodeId {
        let x = self.value(input);
        let (rows, d) = x.shape();
        let gain = w.get(params.gain).row(0);
        let bias = w.get(params.bias).row(0);
        let mut out = Matrix::zeros(rows, d);
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for (k, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = gain[k] * (xr[k] - mean) * inv + bias[k];
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        self.push(
            Op::LayerNorm {
                input,
                params,
                mean: means,
                inv_std: inv_stds,
            },
            out,
            tag,
        )
    }

    pub fn relu(&mut self, input: NodeId, tag: Tag) -> NodeId {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu { input }, out, tag)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, tag: Tag) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add { a, b }, out, tag)
    }

    pub fn attention(&mut self, query: NodeId, key: NodeId, value: NodeId, heads: usize, causal: bool, tag: Tag) -> NodeId {
        let q = self.value(query);
        let k = self.value(key);
        let v = self.value(value);
        let (nq, d) = q.shape();
        let nk = k.rows();
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut out = Matrix::zeros(nq, d);
        let mut weights = Vec::with_capacity(heads);
        let mut scores = vec![0.0; nk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut a = Matrix::zeros(nq, nk);
            for i in 0..nq {
                let visible = visible_keys(i, nk, causal);
                let qi = &q.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..visible {
                    scores[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    max = max.max(scores[j]);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(visible) {
                    *s = math::exp(*s - max);
                    z += *s;
                }
                let orow = &mut out.row_mut(i)[cols.clone()];
                for j in 0..visible {
                    let aij = scores[j] / z;
                    a.set(i, j, aij);
                    for (o, &vj) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += aij * vj;
                    }
                }
            }
            weights.push(a);
        }
        self.push(
            Op::Attention {
                query,
                key,
                value,
                heads,
                causal,
                weights,
            },
            out,
            tag,
        )
    }

    /// Reverse-mode gradients from `seed` (d loss / d node value) into the
    /// parameter gradients `grads`, which are accumulated, not overwritten.
    pub fn backward(&self, w: &TransformerWeights, seed: NodeId, seed_grad: Matrix, grads: &mut [Matrix]) {
        let mut node_grads: Vec<Option<Matrix>> = vec![None; seed.0 + 1];
        node_grads[seed.0] = Some(seed_grad);
        for idx in (0..=seed.0).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Embed { table, ids, scale } => {
                    let g = &mut grads[table.0];
                    for (r, &id) in ids.iter().enumerate() {
                        for (gv, &dv) in g.row_mut(id as usize).iter_mut().zip(dy.row(r)) {
                            *gv += dv * scale;
                        }
                    }
                }
                Op::Linear { input, params } => {
                    let x = self.value(*input);
                    let wt = w.get(params.weight);
                    let dx = dy.matmul_t(wt);
                    grads[params.weight.0].add_assign(&x.t_matmul(&dy));
                    let gb = grads[params.bias.0].row_mut(0);
                    for r in 0..dy.rows() {
                        for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                    accumulate(&mut node_grads, *input, dx);
                }
                Op::LayerNorm {
                    input,
                    params,
                    mean,
                    inv_std,
                } => {
                    let x = self.value(*input);
                    let (rows, d) = x.shape();
                    let gain = w.get(params.gain).row(0);
                    let mut dx = Matrix::zeros(rows, d);
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let (m, inv) = (mean[r], inv_std[r]);
                        let dyr = dy.row(r);
                        for k in 0..d {
                            xhat[k] = (x.get(r, k) - m) * inv;
                            dxhat[k] = dyr[k] * gain[k];
                            dgain[k] += dyr[k] * xhat[k];
                            dbias[k] += dyr[k];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat = dot(&dxhat, &xhat);
                        let dn = d as f64;
                        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / dn * (dn * dxhat[k] - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                        }
                    }
                    for (g, v) in grads[params.gain.0].row_mut(0).iter_mut().zip(dgain) {
                        *g += v;
                    }
                    for (g, v) in grads[params.bias.0].row_mut(0).iter_mut().zip(dbias) {
                        *g += v;
                    }
                    accumulate(&mut node_grads, *input, dx);
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let mut dx = dy;
                    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut node_grads, *input, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads, *b, dy.clone());
                    accumulate(&mut node_grads, *a, dy);
                }
                Op::Attention {
                    query,
                    key,
                    value,
                    heads,
                    causal,
                    weights,
                } => {
                    let q = self.value(*query);
                    let k = self.value(*key);
                    let v = self.value(*value);
                    let (nq, d) = q.shape();
                    let nk = k.rows();
                    let dh = d / heads;
                    let scale = 1.0 / math::sqrt(dh as f64);
                    let mut dq = Matrix::zeros(nq, d);
                    let mut dk = Matrix::zeros(nk, d);
                    let mut dv = Matrix::zeros(nk, d);
                    let mut da = vec![0.0; nk];
                    for (h, a) in weights.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..nq {
                            let visible = visible_keys(i, nk, *causal);
                            let doi = &dy.row(i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                da[j] = dot(doi, &v.row(j)[cols.clone()]);
                                weighted += a.get(i, j) * da[j];
                                let aij = a.get(i, j);
                                for (g, &o) in dv.row_mut(j)[cols.clone()].iter_mut().zip(doi) {
                                    *g += aij * o;
                                }
                            }
                            for j in 0..visible {
                                let ds = a.get(i, j) * (da[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for (g, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                                    *g += ds * kv;
                                }
                                for (g, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&q.row(i)[cols.clone()]) {
                                    *g += ds * qv;
                                }
                            }
                        }
                    }
                    accumulate(&mut node_grads, *value, dv);
                    accumulate(&mut node_grads, *key, dk);
                    accumulate(&mut node_grads, *query, dq);
                }
            }
        }
    }
}

fn accumulate(node_grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut node_grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
