//! Pseudo-bidirectional decoding for local sequence transduction.
//!
//! The decoder self-attention of an encoder-decoder transformer is given
//! access to the encoder representations of the source positions to the
//! right of the current step, standing in for the not-yet-generated future.
//! A single attention mask over `[source ‖ target]` keys keeps training
//! parallel, a segment embedding marks copied versus generated tokens, and
//! the encoder and decoder may share every parameter except cross-attention.

pub mod attention;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use parallel::ExecMode;
pub use scalar::Scalar;
pub use tensor::Tensor;
