//! Character tokenisation, TSV corpora, padded batches and the synthetic
//! misspelling generator.

mod batch;
mod corpus;
mod corrupt;
mod vocab;

pub use batch::{make_batches, source_ids, target_ids, Batch};
pub use corpus::{load_tsv, load_tsv_with, normalize, parse_tsv, write_tsv, Example};
pub use corrupt::{corrupt_word, synthesize, CorruptionConfig};
pub use vocab::{Vocab, BOS, EOS, NUM_SPECIALS, PAD, UNK};

const BUILTIN_WORDS: &str = include_str!("../../data/words.txt");

/// The bundled list of common lowercase English words.
pub fn builtin_words() -> Vec<String> {
    BUILTIN_WORDS
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}
