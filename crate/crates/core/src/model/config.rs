use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Which encoder representation decoder layer `ℓ` copies as pseudo future.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyLayer {
    /// The input of encoder layer `ℓ`, i.e. the same depth as the decoder
    /// states entering layer `ℓ`.
    Input,
    /// The output of encoder layer `ℓ`.
    Output,
}

/// Architecture hyperparameters and ablation switches.
///
/// `use_pbd = false` removes the pseudo future context (plain causal
/// decoder self-attention); `share_params = false` gives the encoder and
/// decoder independent weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest source or target id sequence, specials included.
    pub max_len: usize,
    pub dropout: f64,
    pub use_pbd: bool,
    pub use_segment: bool,
    pub share_params: bool,
    pub tie_output_embedding: bool,
    pub positional: Positional,
    pub activation: Activation,
    pub copy_layer: CopyLayer,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 30,
            d_model: 512,
            n_heads: 8,
            n_layers: 6,
            d_ff: 2048,
            max_len: 64,
            dropout: 0.1,
            use_pbd: true,
            use_segment: true,
            share_params: true,
            tie_output_embedding: false,
            positional: Positional::Learned,
            activation: Activation::Relu,
            copy_layer: CopyLayer::Input,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * d;
        let ffn = 2 * d * self.d_ff + self.d_ff + d;
        let norm = 2 * d;
        let block = attn + ffn + 2 * norm;
        let cross = attn + norm;
        let embeddings = self.vocab_size * d
            + match self.positional {
                Positional::Learned => self.max_len * d,
                Positional::Sinusoidal => 0,
            }
            + if self.use_segment { 2 * d } else { 0 };
        let blocks = if self.share_params { 1 } else { 2 };
        let output = if self.tie_output_embedding { 0 } else { d * self.vocab_size };
        embeddings + self.n_layers * (blocks * block + cross) + 2 * norm + output
    }

    /// Parameters in one shareable block: self-attention, feed-forward and
    /// its two layer norms.
    pub fn shared_block_size(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d
    }
}
