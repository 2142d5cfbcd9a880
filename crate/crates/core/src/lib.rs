//! Lifelong incremental translation lab.
//!
//! A desk-scale framework for studying catastrophic forgetting in
//! multilingual translation. It bundles:
//!
//! - tokenized corpus handling, frequency-sorted vocabularies, incremental
//!   vocabulary union, BPE, indicator tokens and frequency-rank mappings
//!   ([`vocab`], [`corpus`], [`bpe`]);
//! - a small encoder-decoder translation model with a reverse-mode tape,
//!   Adam updates, vocabulary-growth surgery and checkpointing ([`model`],
//!   [`tape`], [`optim`], [`checkpoint`]);
//! - greedy / beam / k-best decoding ([`decoding`]);
//! - continual-learning strategies: multilingual, direct, pseudo-input and
//!   reverse-teacher distillation plus fine-tuning, joint-training and EWC
//!   baselines ([`distill`], [`trainer`]);
//! - corpus-level BLEU and forgetting reports ([`bleu`], [`report`]);
//! - a deterministic synthetic language-pair generator with oracle
//!   translations ([`synth`]).

pub mod bleu;
pub mod bpe;
pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod distill;
pub mod error;
pub mod model;
pub mod optim;
pub mod report;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
