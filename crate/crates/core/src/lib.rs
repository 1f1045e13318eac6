//! Similarity-weighted label smoothing for sequence generation.
//!
//! The crate builds data-dependent soft targets from word vectors and an
//! optional synonym lexicon, trains a small transformer encoder-decoder
//! under cross-entropy or KL objectives, and scores generated responses
//! with BLEU, ROUGE and METEOR.
//!
//! Interchangeable pieces (loss functions and target policies) sit behind
//! the [`losses::EntropyLoss`] and [`smoothing::TargetPolicy`] traits and
//! are looked up by name through their registries.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod smoothing;
pub mod vocab;

pub use error::{Error, Result};
