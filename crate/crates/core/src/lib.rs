//! Core algorithms for studying noise-robust translation training: parallel
//! corpora with ground-truth provenance, similarity-controlled misalignment,
//! pre-filter evaluation, a small encoder-decoder with exact gradients, the
//! baseline/truncation/self-correction objectives, and evaluation metrics.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod filters;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod simnoise;
pub mod train;

pub use corpus::{ParallelCorpus, Provenance, Sentence, SentencePair, TokenId, TokenScheme, Vocab};
pub use error::{Error, Result};
