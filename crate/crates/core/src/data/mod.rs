//! Tokenization, dataset I/O, batching and synthetic corpora.

mod batch;
mod batching;
mod example;
mod synth;
mod tsv;
mod vocab;

pub use batch::TokenBatch;
pub use batching::{batch_indices, encode_texts, make_batches, Batch};
pub use example::{expect_schema, Example, Schema, MAX_SCORE, NUM_CLASSES};
pub use synth::{scored_pair, synth_sentences, synth_toy_corpus, NUM_SLOTS};
pub use tsv::{load_tsv, write_tsv, write_tsv_as};
pub use vocab::{words, Vocab, CLS, PAD, RESERVED, SEP, UNK};
