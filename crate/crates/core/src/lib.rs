//! Graph cross-correlated recommendation.
//!
//! Users and items are read out hop by hop from the interaction graph
//! ([`pgr`]), every user-hop/item-hop pair is correlated ([`cca`]) and a small
//! feed-forward head turns the correlations into a relevance score.

pub mod baselines;
pub mod cca;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pgr;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{GcrError, Result};
