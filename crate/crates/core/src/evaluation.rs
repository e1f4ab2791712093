//! Ranking metrics over labeled candidate groups.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::matcher::params::Real;
use crate::matcher::{Matcher, Role};

/// One context with its candidate responses and 0/1 relevance labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalGroup {
    pub context: Vec<TokenSeq>,
    pub last_utterance: TokenSeq,
    pub candidates: Vec<TokenSeq>,
    pub labels: Vec<u8>,
}

impl EvalGroup {
    /// Context turns followed by the last utterance.
    pub fn turns(&self) -> Vec<&[u32]> {
        self.context
            .iter()
            .map(|t| t.as_slice())
            .chain(std::iter::once(self.last_utterance.as_slice()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
    pub num_groups: usize,
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn rank_candidates<F: Real>(model: &Matcher<F>, group: &EvalGroup) -> Result<Vec<usize>> {
    Ok(rank_by_scores(&score_group(model, group)?))
}

pub fn score_group<F: Real>(model: &Matcher<F>, group: &EvalGroup) -> Result<Vec<f64>> {
    if model.role() != Role::ResponseSelection {
        return Err(Error::Model("ranking responses needs a response-selection model".into()));
    }
    let turns = group.turns();
    group
        .candidates
        .iter()
        .map(|c| model.score(&turns, c).map(|p| p.value()))
        .collect()
}

fn require_positive(labels: &[u8]) -> Result<()> {
    if labels.contains(&1) {
        Ok(())
    } else {
        Err(Error::Data("ranking has no positive label".into()))
    }
}

pub fn average_precision(ranked: &[u8]) -> Result<f64> {
    require_positive(ranked)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &l) in ranked.iter().enumerate() {
        if l == 1 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

pub fn reciprocal_rank(ranked: &[u8]) -> Result<f64> {
    require_positive(ranked)?;
    let first = ranked.iter().position(|&l| l == 1).unwrap_or_default();
    Ok(1.0 / (first + 1) as f64)
}

pub fn precision_at_1(ranked: &[u8]) -> Result<f64> {
    match ranked.first() {
        Some(1) => Ok(1.0),
        Some(_) => Ok(0.0),
        None => Err(Error::Data("empty ranking".into())),
    }
}

/// Macro-averaged metrics for already-ranked label lists.
pub fn metrics_from_rankings(ranked: &[Vec<u8>]) -> Result<Metrics> {
    if ranked.is_empty() {
        return Err(Error::Data("no groups to evaluate".into()));
    }
    let (mut ap, mut rr, mut p1) = (0.0, 0.0, 0.0);
    for r in ranked {
        ap += average_precision(r)?;
        rr += reciprocal_rank(r)?;
        p1 += precision_at_1(r)?;
    }
    let n = ranked.len() as f64;
    Ok(Metrics {
        map: ap / n,
        mrr: rr / n,
        p_at_1: p1 / n,
        num_groups: ranked.len(),
    })
}

/// Labels reordered by descending score.
pub fn ranked_labels(scores: &[f64], labels: &[u8]) -> Vec<u8> {
    rank_by_scores(scores).into_iter().map(|i| labels[i]).collect()
}

pub fn evaluate<F: Real>(model: &Matcher<F>, groups: &[EvalGroup]) -> Result<Metrics> {
    if groups.is_empty() {
        return Err(Error::Data("no groups to evaluate".into()));
    }
    let ranked = groups
        .iter()
        .map(|g| Ok(ranked_labels(&score_group(model, g)?, &g.labels)))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_rankings(&ranked)
}
