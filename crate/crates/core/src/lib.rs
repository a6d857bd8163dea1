//! Janus bidirectional pretraining for nucleotide sequences.
//!
//! Two independent causal encoder stacks (gated recurrence, FFN/MoE, optional
//! causal attention) read a sequence left-to-right and right-to-left. A single
//! fusion attention layer over the concatenated `2T` states, restricted by a
//! four-case admissibility mask, predicts every token from all other tokens
//! without ever seeing the token itself.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod fusion;
pub mod genome;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
