use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conversation, PointwiseExample, TokenSeq, TrainingInstance};
use crate::error::{Error, Result};

/// Draws an index `!= own` whose item differs from `own`'s item. Returns
/// `None` when every other item is identical to the excluded one.
pub(crate) fn draw_other<R: Rng, T: PartialEq>(rng: &mut R, items: &[T], own: usize) -> Option<usize> {
    let n = items.len();
    for _ in 0..16 {
        let mut j = rng.gen_range(0..n - 1);
        if j >= own {
            j += 1;
        }
        if items[j] != items[own] {
            return Some(j);
        }
    }
    // Rare: fall back to a seeded scan so the draw still terminates.
    let mut order: Vec<usize> = (0..n).filter(|&j| j != own).collect();
    order.shuffle(rng);
    order.into_iter().find(|&j| items[j] != items[own])
}

/// Pairs every conversation's true response (label 1) with `ratio` responses
/// drawn uniformly from other conversations (label 0).
pub fn sample_negatives(
    conversations: &[Conversation],
    ratio: usize,
    seed: u64,
) -> Result<Vec<PointwiseExample>> {
    if ratio < 1 {
        return Err(Error::Config("negative sampling ratio must be at least 1".into()));
    }
    if conversations.len() < 2 {
        return Err(Error::Data(
            "negative sampling needs at least two conversations".into(),
        ));
    }
    let responses: Vec<&TokenSeq> = conversations.iter().map(|c| &c.response).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(conversations.len() * (1 + ratio));
    for (i, c) in conversations.iter().enumerate() {
        let turns = c.response_turns();
        out.push(PointwiseExample {
            turns: turns.clone(),
            candidate: c.response.clone(),
            label: 1,
            noise_flag: None,
            source: i,
        });
        for _ in 0..ratio {
            let j = draw_other(&mut rng, &responses, i).ok_or_else(|| {
                Error::Data(format!("conversation {i}: every other response is identical"))
            })?;
            out.push(PointwiseExample {
                turns: turns.clone(),
                candidate: responses[j].clone(),
                label: 0,
                noise_flag: None,
                source: i,
            });
        }
    }
    Ok(out)
}

/// Pairs each context's positive with its single negative.
pub fn build_pairwise(examples: &[PointwiseExample]) -> Result<Vec<TrainingInstance>> {
    struct Slot<'a> {
        pos: Vec<&'a PointwiseExample>,
        neg: Vec<&'a PointwiseExample>,
    }
    let mut order: Vec<usize> = Vec::new();
    let mut slots: std::collections::HashMap<usize, Slot> = std::collections::HashMap::new();
    for ex in examples {
        let slot = slots.entry(ex.source).or_insert_with(|| Slot {
            pos: Vec::new(),
            neg: Vec::new(),
        });
        if ex.label == 1 {
            if slot.pos.is_empty() {
                order.push(ex.source);
            }
            slot.pos.push(ex);
        } else {
            slot.neg.push(ex);
        }
    }
    if let Some((src, _)) = slots.iter().find(|(_, s)| s.pos.is_empty()) {
        return Err(Error::Data(format!("context {src} has negatives but no positive")));
    }
    order
        .into_iter()
        .map(|src| {
            let slot = &slots[&src];
            if slot.pos.len() != 1 || slot.neg.len() != 1 {
                return Err(Error::Data(format!(
                    "context {src} has {} positives and {} negatives; pairing needs exactly one of each",
                    slot.pos.len(),
                    slot.neg.len()
                )));
            }
            let (p, n) = (slot.pos[0], slot.neg[0]);
            if p.turns != n.turns {
                return Err(Error::Data(format!(
                    "context {src}: positive and negative disagree on the context"
                )));
            }
            if p.candidate == n.candidate {
                return Err(Error::Data(format!(
                    "context {src}: positive and negative candidates are identical"
                )));
            }
            let (anchor, context) = p
                .turns
                .split_last()
                .ok_or_else(|| Error::Data(format!("context {src} has no turns")))?;
            Ok(TrainingInstance {
                context: context.to_vec(),
                anchor: anchor.clone(),
                positive: p.candidate.clone(),
                negative: n.candidate.clone(),
                noise_flag: n.noise_flag,
                source: src,
            })
        })
        .collect()
}

/// Builds last-utterance selection data: the response becomes the final
/// context turn and the last utterance becomes the candidate, paired with one
/// last utterance drawn from another conversation.
///
/// With `single_turn` the context is the response alone.
pub fn derive_last_utterance_data(
    conversations: &[Conversation],
    seed: u64,
    single_turn: bool,
) -> Result<Vec<PointwiseExample>> {
    if conversations.len() < 2 {
        return Err(Error::Data(
            "last-utterance data needs at least two conversations".into(),
        ));
    }
    let lasts: Vec<&TokenSeq> = conversations.iter().map(|c| &c.last_utterance).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(conversations.len() * 2);
    for (i, c) in conversations.iter().enumerate() {
        let mut turns = if single_turn { Vec::new() } else { c.context.clone() };
        turns.push(c.response.clone());
        out.push(PointwiseExample {
            turns: turns.clone(),
            candidate: c.last_utterance.clone(),
            label: 1,
            noise_flag: None,
            source: i,
        });
        let j = draw_other(&mut rng, &lasts, i).ok_or_else(|| {
            Error::Data(format!("conversation {i}: every other last utterance is identical"))
        })?;
        out.push(PointwiseExample {
            turns,
            candidate: lasts[j].clone(),
            label: 0,
            noise_flag: None,
            source: i,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConversationText;

    fn conv(i: u32) -> Conversation {
        Conversation {
            context: vec![vec![100 + i], vec![200 + i]],
            last_utterance: vec![300 + i],
            response: vec![400 + i],
            text: ConversationText {
                context: vec![],
                last_utterance: String::new(),
                response: String::new(),
            },
            negatives: vec![],
        }
    }

    fn convs(n: u32) -> Vec<Conversation> {
        (0..n).map(conv).collect()
    }

    #[test]
    fn one_to_one_sampling_counts() {
        let ex = sample_negatives(&convs(100), 1, 7).unwrap();
        assert_eq!(ex.len(), 200);
        assert_eq!(ex.iter().filter(|e| e.label == 1).count(), 100);
        for e in ex.iter().filter(|e| e.label == 0) {
            assert_ne!(e.candidate, vec![400 + e.source as u32]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let c = convs(30);
        assert_eq!(sample_negatives(&c, 2, 5).unwrap(), sample_negatives(&c, 2, 5).unwrap());
        assert_ne!(sample_negatives(&c, 1, 5).unwrap(), sample_negatives(&c, 1, 6).unwrap());
    }

    #[test]
    fn zero_ratio_and_tiny_corpus_are_rejected() {
        assert!(sample_negatives(&convs(10), 0, 1).is_err());
        assert!(sample_negatives(&convs(1), 1, 1).is_err());
    }

    #[test]
    fn pairing_keeps_fields_and_order() {
        let ex = sample_negatives(&convs(100), 1, 3).unwrap();
        let inst = build_pairwise(&ex).unwrap();
        assert_eq!(inst.len(), 100);
        for (i, t) in inst.iter().enumerate() {
            assert_eq!(t.source, i);
            assert_eq!(t.context, vec![vec![100 + i as u32], vec![200 + i as u32]]);
            assert_eq!(t.anchor, vec![300 + i as u32]);
            assert_eq!(t.positive, vec![400 + i as u32]);
        }
    }

    #[test]
    fn pairing_rejects_two_negatives() {
        let ex = sample_negatives(&convs(10), 2, 3).unwrap();
        assert!(build_pairwise(&ex).is_err());
    }

    #[test]
    fn last_utterance_data_layout() {
        let ex = derive_last_utterance_data(&convs(100), 9, false).unwrap();
        assert_eq!(ex.len(), 200);
        let pos = &ex[0];
        assert_eq!(pos.label, 1);
        assert_eq!(pos.turns, vec![vec![100], vec![200], vec![400]]);
        assert_eq!(pos.candidate, vec![300]);
        assert_eq!(ex[1].label, 0);
        assert_ne!(ex[1].candidate, vec![300]);
        let single = derive_last_utterance_data(&convs(5), 9, true).unwrap();
        assert_eq!(single[0].turns, vec![vec![400]]);
    }

    #[test]
    fn last_utterance_negatives_are_seeded() {
        let c = convs(50);
        assert_eq!(
            derive_last_utterance_data(&c, 1, false).unwrap(),
            derive_last_utterance_data(&c, 1, false).unwrap()
        );
    }
}
