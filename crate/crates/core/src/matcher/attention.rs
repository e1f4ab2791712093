//! Deep attention matching at reduced width.
//!
//! Utterances and the candidate pass through the same stack of
//! self-attention blocks (multi-head attention plus a ReLU feed-forward
//! layer, both residual). At every depth, including the embeddings, each
//! turn is matched against the candidate twice: a self map `U R^T` and a
//! cross map built from mutually attended representations. The maps are
//! stacked as channels, convolved (3x3, ReLU) and globally max-pooled per
//! turn, max-pooled across turns and scored by a two-layer perceptron.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet, Real};
use super::{Hyper, INIT_SCALE};
use crate::corpus::TokenId;

#[derive(Debug, Clone, PartialEq)]
struct Block {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    ffn_in: ParamId,
    ffn_in_bias: ParamId,
    ffn_out: ParamId,
    ffn_out_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Ids {
    heads: usize,
    embedding: ParamId,
    blocks: Vec<Block>,
    conv_weight: ParamId,
    conv_bias: ParamId,
    hidden_weight: ParamId,
    hidden_bias: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl Ids {
    pub fn register<F: Real, R: Rng>(
        p: &mut ParamSet<F>,
        h: &Hyper,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let e = h.embed_dim;
        let embedding = p.uniform("embedding", &[vocab_size, e], INIT_SCALE, rng);
        let blocks = (0..h.layers)
            .map(|l| Block {
                query: p.uniform(&format!("block{l}.query"), &[e, e], INIT_SCALE, rng),
                key: p.uniform(&format!("block{l}.key"), &[e, e], INIT_SCALE, rng),
                value: p.uniform(&format!("block{l}.value"), &[e, e], INIT_SCALE, rng),
                output: p.uniform(&format!("block{l}.output"), &[e, e], INIT_SCALE, rng),
                ffn_in: p.uniform(&format!("block{l}.ffn_in"), &[e, h.hidden_dim], INIT_SCALE, rng),
                ffn_in_bias: p.zeros(&format!("block{l}.ffn_in.bias"), &[h.hidden_dim]),
                ffn_out: p.uniform(&format!("block{l}.ffn_out"), &[h.hidden_dim, e], INIT_SCALE, rng),
                ffn_out_bias: p.zeros(&format!("block{l}.ffn_out.bias"), &[e]),
            })
            .collect();
        let channels = 2 * (h.layers + 1);
        Self {
            heads: h.heads,
            embedding,
            blocks,
            conv_weight: p.uniform("conv.weight", &[h.conv_channels, channels, 3, 3], INIT_SCALE, rng),
            conv_bias: p.zeros("conv.bias", &[h.conv_channels]),
            hidden_weight: p.uniform("mlp.hidden", &[h.conv_channels, h.hidden_dim], INIT_SCALE, rng),
            hidden_bias: p.zeros("mlp.hidden.bias", &[h.hidden_dim]),
            out_weight: p.uniform("mlp.out", &[h.hidden_dim, 1], INIT_SCALE, rng),
            out_bias: p.zeros("mlp.out.bias", &[1]),
        }
    }

    fn block<F: Real>(&self, g: &mut Graph<'_, F>, b: &Block, x: Var) -> Var {
        let heads = self.heads;
        let e = g.shape(x)[1];
        let d = e / heads;
        let wq = g.param(b.query);
        let wk = g.param(b.key);
        let wv = g.param(b.value);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let scale = F::of(1.0 / (d as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * d, d);
            let kh = g.slice_cols(k, hd * d, d);
            let vh = g.slice_cols(v, hd * d, d);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let wo = g.param(b.output);
        let attended = g.matmul(cat, wo);
        let y = g.add(x, attended);
        let f = g.linear(y, b.ffn_in, b.ffn_in_bias);
        let f = g.relu(f);
        let f = g.linear(f, b.ffn_out, b.ffn_out_bias);
        g.add(y, f)
    }

    /// Representations at every depth: embeddings, then each block's output.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, tokens: &[TokenId]) -> Vec<Var> {
        let mut reps = Vec::with_capacity(self.blocks.len() + 1);
        let mut x = g.embed(self.embedding, tokens);
        reps.push(x);
        for b in &self.blocks {
            x = self.block(g, b, x);
            reps.push(x);
        }
        reps
    }

    pub fn logit<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h: &Hyper,
        turns: &[Vec<TokenId>],
        cand: &[TokenId],
    ) -> Var {
        let scale = F::of(1.0 / (h.embed_dim as f64).sqrt());
        let reps_r = self.encode(g, cand);
        let mut turn_features = Vec::with_capacity(turns.len());
        for turn in turns {
            let reps_u = self.encode(g, turn);
            let mut maps = Vec::with_capacity(2 * reps_u.len());
            for (&u, &r) in reps_u.iter().zip(&reps_r) {
                let s = g.matmul_t(u, r);
                let s = g.scale(s, scale);
                let u_att = g.softmax_rows(s);
                let u_cross = g.matmul(u_att, r);
                let st = g.transpose(s);
                let r_att = g.softmax_rows(st);
                let r_cross = g.matmul(r_att, u);
                let c = g.matmul_t(u_cross, r_cross);
                let c = g.scale(c, scale);
                maps.push(s);
                maps.push(c);
            }
            let image = g.stack(&maps);
            let conv = g.conv3x3(image, self.conv_weight, self.conv_bias);
            let act = g.relu(conv);
            turn_features.push(g.max_over_cols(act));
        }
        let stacked = g.stack(&turn_features);
        let pooled = g.max_over_rows(stacked);
        let x = g.reshape(pooled, &[1, h.conv_channels]);
        let hidden = g.linear(x, self.hidden_weight, self.hidden_bias);
        let hidden = g.tanh(hidden);
        g.linear(hidden, self.out_weight, self.out_bias)
    }
}
