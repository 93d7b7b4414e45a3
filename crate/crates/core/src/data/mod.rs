//! Synthetic tasks, vocabulary, corpus files, and batching.

mod batch;
mod corpus;
mod synth;
mod vocab;

pub use batch::{encode_batch, Batch};
pub use corpus::{count_modes, load_corpus, save_corpus, LoadedCorpus, ModeCount, Pair, ParallelCorpus};
pub use synth::{generate_synthetic_corpus, Mechanism, SourceEntry, SyntheticTask, SyntheticTaskSpec, MIN_CLASSES};
pub use vocab::{build_vocab, TokenId, Vocab, BOS, EOS, MASK, PAD, RESERVED, RESERVED_TOKENS, UNK};
