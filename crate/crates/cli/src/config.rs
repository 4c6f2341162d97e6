use std::path::{Path, PathBuf};

use pbd::model::{Activation, CopyLayer, ModelConfig, Positional};
use pbd::training::{AdamConfig, TrainOptions};
use pbd::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Everything a training run needs, as one flat JSON object. Relative
/// paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_path: PathBuf,
    pub eval_path: Option<PathBuf>,
    pub checkpoint_path: PathBuf,
    pub log_path: Option<PathBuf>,
    /// Characters of the vocabulary; taken from the corpora when absent.
    pub alphabet: Option<String>,
    pub lowercase: bool,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
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

    pub steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_factor: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between checkpoints; `0` writes only the final one.
    pub checkpoint_every: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub dropout_seed: u64,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainOptions::default();
        RunConfig {
            train_path: PathBuf::new(),
            eval_path: None,
            checkpoint_path: PathBuf::from("model.pbdc"),
            log_path: None,
            alphabet: None,
            lowercase: false,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_len: m.max_len,
            dropout: m.dropout,
            use_pbd: m.use_pbd,
            use_segment: m.use_segment,
            share_params: m.share_params,
            tie_output_embedding: m.tie_output_embedding,
            positional: m.positional,
            activation: m.activation,
            copy_layer: m.copy_layer,
            layer_norm_eps: m.layer_norm_eps,
            steps: 2000,
            batch_size: 64,
            warmup: t.warmup,
            lr_factor: t.lr_factor,
            label_smoothing: t.label_smoothing,
            clip_norm: t.clip_norm,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            checkpoint_every: 0,
            init_seed: 1,
            data_seed: 2,
            dropout_seed: 3,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.train_path);
        resolve(&mut cfg.checkpoint_path);
        if let Some(p) = cfg.eval_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.log_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serialises")
    }

    fn validate(&self) -> Result<()> {
        if self.train_path.as_os_str().is_empty() {
            return Err(Error::Config("train_path is required".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.warmup == 0 {
            return Err(Error::Config("steps, batch_size and warmup must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        // The model fields are checked once the vocabulary size is known;
        // use a placeholder size here to catch the rest early.
        self.model_config(pbd::data::NUM_SPECIALS + 1).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            use_pbd: self.use_pbd,
            use_segment: self.use_segment,
            share_params: self.share_params,
            tie_output_embedding: self.tie_output_embedding,
            positional: self.positional,
            activation: self.activation,
            copy_layer: self.copy_layer,
            layer_norm_eps: self.layer_norm_eps,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            label_smoothing: self.label_smoothing,
            clip_norm: self.clip_norm,
            warmup: self.warmup,
            lr_factor: self.lr_factor,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            dropout_seed: self.dropout_seed,
            ..TrainOptions::default()
        }
    }
}
