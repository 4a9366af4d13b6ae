//! Beam-search translation, BLEU scoring, the representation-similarity
//! probe, and incongruent decoding.

pub mod beam;
pub mod bleu;
pub mod probe;

pub use beam::{beam_search, greedy_decode, BeamHypothesis};
pub use bleu::{corpus_bleu, words, BleuReport};
pub use probe::{
    incongruent_decode, render_tokens, similarity_probe, translate_corpus, SimilarityReport,
};
