//! Corpus preprocessing, visual feature ingestion, and batching.

pub mod batch;
pub mod bpe;
pub mod features;
pub mod vocab;

pub use batch::{make_batches, read_parallel_corpus, Batch, ParallelExample};
pub use bpe::{detokenize, learn_bpe, BpeModel};
pub use features::{load_image_index, FeatureTable};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
