//! Greedy and beam-search decoding, and evaluation metrics.

mod decode;
mod metrics;

pub use decode::{
    argmax, beam_search, decode, decode_all, evaluate, greedy_decode, log_softmax, transduce, Decoded,
    Strategy, DEFAULT_ALPHA,
};
pub use metrics::{char_error_rate, exact_match, levenshtein, EvalReport};
