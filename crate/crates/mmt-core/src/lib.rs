//! Desk-scale multimodal machine translation with dual-stream consistency
//! training.
//!
//! A tiny transformer translates source text conditioned on a precomputed
//! image feature vector. Training feeds two feature streams per sentence
//! ("synthetic" and "authentic"), ties their encoder-side representations
//! together with a relaxed optimal-transport loss and their decoder output
//! distributions with a KL loss, so inference needs only one stream.
//!
//! Subsystems:
//! - [`tensor`]: f32 tensors with reverse-mode autodiff on a tape
//! - [`data`]: BPE, vocabulary, feature tables, token-budget batching
//! - [`model`]: the multimodal transformer
//! - [`losses`]: transport / KL consistency losses and their combination
//! - [`train`]: Adam, gradient accumulation, checkpointing and averaging
//! - [`infer`]: beam search, BLEU, similarity probe, incongruent decoding

pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
