//! Lexical unit decoding (LUD) at desk scale.
//!
//! The pipeline fine-tunes a small causal transformer on a corpus, measures
//! how confidently it predicts each ground-truth target token, groups runs of
//! confident tokens into *lexical units*, and rewrites every multi-token unit
//! into a training instance whose unit tokens are replaced by a trainable PAD
//! symbol. After continual training on the original data mixed with those
//! instances, the model can propose `k` tokens per forward pass; the decoder
//! accepts the longest confident prefix and falls back to one token otherwise.
//!
//! Module map:
//! - [`corpus`]: vocabulary, tokenization, synthetic corpora, dataset files
//! - [`model`]: decoder-only transformer, ignore-masked training, checkpoints
//! - [`identify`]: lexical unit segmentation from teacher-forced probabilities
//! - [`reconfigure`]: PAD instances and the mixed continual-training set
//! - [`decode`]: look-ahead decoding and the greedy baseline
//! - [`eval`]: FCR/WAR/quality metrics, histograms, reports
//! - [`pipeline`]: config-driven stages shared by the CLI and the service
//! - [`api`]: JSON wire types for the HTTP service

pub mod api;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod identify;
mod jsonl;
pub mod model;
pub mod pipeline;
pub mod reconfigure;

pub use error::{LudError, Result};

/// Index into a [`corpus::Vocabulary`].
pub type TokenId = u32;
