//! Zero-shot VQA answer ranking.
//!
//! Candidate answers come from two sources: a language-model provider
//! prompted with image captions and rewritten questions, and a knowledge
//! graph queried through trainable projection heads. The two candidate sets
//! are fused with a piecewise score, and the five weights of the combined
//! training objective are tuned by a particle swarm constrained to the
//! probability simplex whenever the validation score stagnates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod embeddings;
pub mod error;
pub mod fusion;
pub mod kg;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod pso;
pub mod qsearch;
pub mod weights;

pub use error::{Error, Result};
pub use weights::{combined_loss, LossParts, LossWeights};
