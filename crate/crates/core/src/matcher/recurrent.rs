//! Sequential matching network at reduced width.
//!
//! Per context turn: a word-level similarity matrix over embeddings and a
//! sequence-level matrix `h_k A h_r^T` over GRU states are zero-padded to
//! `max_len x max_len`, stacked as two channels, convolved (3x3, ReLU),
//! max-pooled (2x2) and projected to a matching vector. A turn-level GRU
//! accumulates the matching vectors; its last state is mapped to the logit.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamSet, Real};
use super::{Hyper, INIT_SCALE};
use crate::corpus::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub(super) struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl GruIds {
    pub fn register<F: Real, R: Rng>(
        p: &mut ParamSet<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_ih: p.uniform(&format!("{prefix}.w_ih"), &[input, 3 * hidden], INIT_SCALE, rng),
            w_hh: p.uniform(&format!("{prefix}.w_hh"), &[hidden, 3 * hidden], INIT_SCALE, rng),
            b_ih: p.zeros(&format!("{prefix}.b_ih"), &[3 * hidden]),
            b_hh: p.zeros(&format!("{prefix}.b_hh"), &[3 * hidden]),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        g.gru(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Ids {
    embedding: ParamId,
    utterance_gru: GruIds,
    similarity: ParamId,
    conv_weight: ParamId,
    conv_bias: ParamId,
    match_weight: ParamId,
    match_bias: ParamId,
    turn_gru: GruIds,
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
        let pooled = h.conv_channels * (h.max_len / 2) * (h.max_len / 2);
        Self {
            embedding: p.uniform("embedding", &[vocab_size, h.embed_dim], INIT_SCALE, rng),
            utterance_gru: GruIds::register(p, "utterance_gru", h.embed_dim, h.hidden_dim, rng),
            similarity: p.uniform("similarity", &[h.hidden_dim, h.hidden_dim], INIT_SCALE, rng),
            conv_weight: p.uniform("conv.weight", &[h.conv_channels, 2, 3, 3], INIT_SCALE, rng),
            conv_bias: p.zeros("conv.bias", &[h.conv_channels]),
            match_weight: p.uniform("match.weight", &[pooled, h.match_dim], INIT_SCALE, rng),
            match_bias: p.zeros("match.bias", &[h.match_dim]),
            turn_gru: GruIds::register(p, "turn_gru", h.match_dim, h.hidden_dim, rng),
            out_weight: p.uniform("out.weight", &[h.hidden_dim, 1], INIT_SCALE, rng),
            out_bias: p.zeros("out.bias", &[1]),
        }
    }

    /// GRU states of an utterance, `[len, hidden]`.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, tokens: &[TokenId]) -> Var {
        let e = g.embed(self.embedding, tokens);
        self.utterance_gru.apply(g, e)
    }

    pub fn logit<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h: &Hyper,
        turns: &[Vec<TokenId>],
        cand: &[TokenId],
    ) -> Var {
        let m = h.max_len;
        let pooled = h.conv_channels * (m / 2) * (m / 2);
        let emb_r = g.embed(self.embedding, cand);
        let hid_r = self.utterance_gru.apply(g, emb_r);
        let a = g.param(self.similarity);

        let mut vectors = Vec::with_capacity(turns.len());
        for turn in turns {
            let emb_k = g.embed(self.embedding, turn);
            let hid_k = self.utterance_gru.apply(g, emb_k);
            let word = g.matmul_t(emb_k, emb_r);
            let projected = g.matmul(hid_k, a);
            let seq = g.matmul_t(projected, hid_r);
            let word = g.pad_to(word, m, m);
            let seq = g.pad_to(seq, m, m);
            let image = g.stack(&[word, seq]);
            let conv = g.conv3x3(image, self.conv_weight, self.conv_bias);
            let act = g.relu(conv);
            let pool = g.max_pool2(act);
            let flat = g.reshape(pool, &[1, pooled]);
            let v = g.linear(flat, self.match_weight, self.match_bias);
            vectors.push(v);
        }
        let stacked = g.stack(&vectors);
        let seq = g.reshape(stacked, &[turns.len(), h.match_dim]);
        let states = self.turn_gru.apply(g, seq);
        let last = g.slice_rows(states, turns.len() - 1, 1);
        g.linear(last, self.out_weight, self.out_bias)
    }
}
