//! Instance-weighted training for multi-turn response selection.
//!
//! A last-utterance selection model scores how well each training
//! response identifies its own conversation. Those scores become
//! per-instance weights for a pairwise margin loss, so that sampled
//! negatives which are in fact valid replies stop pushing the response
//! model in the wrong direction.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod matcher;
pub mod objectives;
pub mod training;
pub mod weighting;

pub use error::{Error, Result};
