//! Embeddings, encoder stack and pseudo-bidirectional decoder stack.
//!
//! Parameters live in one flat store. A [`ParamLayout`] maps every role to
//! an index into it; with `share_params` the encoder and decoder blocks of
//! a layer resolve to the same indices, so the tensors are aliased rather
//! than copied.

mod check;
mod config;
mod forward;
mod incremental;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use check::gradient_check;
pub use config::{Activation, CopyLayer, ModelConfig, Positional};
pub use forward::{Dropout, EncoderStates, EncoderVars};
pub use incremental::DecodeCache;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

/// Self-attention, feed-forward and their two norms: the unit that the
/// encoder and decoder may share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub attn: AttnIds,
    pub norm1: NormIds,
    pub norm2: NormIds,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderIds {
    pub block: BlockIds,
    pub cross: AttnIds,
    pub cross_norm: NormIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tokens: usize,
    pub positions: Option<usize>,
    pub segments: Option<usize>,
    pub encoder: Vec<BlockIds>,
    pub decoder: Vec<DecoderIds>,
    pub encoder_norm: NormIds,
    pub decoder_norm: NormIds,
    /// `None` when the output projection is the transposed token table.
    pub output: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Normal(f64),
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(Spec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut w = |n: &str| self.push(format!("{prefix}.{n}"), &[d, d], Init::Xavier);
        AttnIds {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.push(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, d_ff: usize) -> BlockIds {
        BlockIds {
            attn: self.attn(&format!("{prefix}.self_attn"), d),
            norm1: self.norm(&format!("{prefix}.norm1"), d),
            norm2: self.norm(&format!("{prefix}.norm2"), d),
            w1: self.push(format!("{prefix}.ffn.w1"), &[d, d_ff], Init::Xavier),
            b1: self.push(format!("{prefix}.ffn.b1"), &[d_ff], Init::Zeros),
            w2: self.push(format!("{prefix}.ffn.w2"), &[d_ff, d], Init::Xavier),
            b2: self.push(format!("{prefix}.ffn.b2"), &[d], Init::Zeros),
        }
    }
}

fn plan(config: &ModelConfig) -> (ParamLayout, Vec<Spec>) {
    let d = config.d_model;
    let mut b = Builder { specs: Vec::new() };
    let tokens = b.push(
        "embed.tokens".into(),
        &[config.vocab_size, d],
        Init::Normal((d as f64).powf(-0.5)),
    );
    let positions = (config.positional == Positional::Learned)
        .then(|| b.push("embed.positions".into(), &[config.max_len, d], Init::Normal(0.02)));
    let segments = config
        .use_segment
        .then(|| b.push("embed.segments".into(), &[2, d], Init::Normal(0.02)));
    let mut encoder = Vec::with_capacity(config.n_layers);
    let mut decoder = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let (enc, dec) = if config.share_params {
            let shared = b.block(&format!("layers.{l}"), d, config.d_ff);
            (shared, shared)
        } else {
            (
                b.block(&format!("encoder.layers.{l}"), d, config.d_ff),
                b.block(&format!("decoder.layers.{l}"), d, config.d_ff),
            )
        };
        encoder.push(enc);
        decoder.push(DecoderIds {
            block: dec,
            cross: b.attn(&format!("decoder.layers.{l}.cross_attn"), d),
            cross_norm: b.norm(&format!("decoder.layers.{l}.cross_norm"), d),
        });
    }
    let encoder_norm = b.norm("encoder.final_norm", d);
    let decoder_norm = b.norm("decoder.final_norm", d);
    let output = (!config.tie_output_embedding)
        .then(|| b.push("output.weight".into(), &[d, config.vocab_size], Init::Xavier));
    let layout = ParamLayout {
        tokens,
        positions,
        segments,
        encoder,
        decoder,
        encoder_norm,
        decoder_norm,
        output,
    };
    (layout, b.specs)
}

fn sinusoidal<F: Scalar>(max_len: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[max_len, d], |i| {
        let (pos, c) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        let angle = pos * freq;
        F::of_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// The parameter store of an encoder-decoder model.
#[derive(Debug, Clone)]
pub struct TransformerModel<F: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Tensor<F>>,
    names: Vec<String>,
    layout: ParamLayout,
    sinusoid: Option<Tensor<F>>,
}

/// Builds a model with deterministic random weights.
///
/// Matrices use Xavier-uniform, token embeddings `N(0, 1/d)`, positional
/// and segment tables `N(0, 0.02²)`, norm gains one and biases zero.
pub fn init_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<TransformerModel<F>> {
    config.validate()?;
    let (layout, specs) = plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(specs.len());
    let mut names = Vec::with_capacity(specs.len());
    for s in specs {
        let t = match s.init {
            Init::Xavier => {
                let bound = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                Tensor::uniform(&s.shape, bound, &mut rng)
            }
            Init::Normal(std) => Tensor::normal(&s.shape, std, &mut rng),
            Init::Ones => Tensor::full(&s.shape, F::one()),
            Init::Zeros => Tensor::zeros(&s.shape),
        };
        params.push(t);
        names.push(s.name);
    }
    Ok(TransformerModel::assemble(config.clone(), layout, names, params))
}

impl<F: Scalar> TransformerModel<F> {
    fn assemble(config: ModelConfig, layout: ParamLayout, names: Vec<String>, params: Vec<Tensor<F>>) -> Self {
        let sinusoid = (config.positional == Positional::Sinusoidal)
            .then(|| sinusoidal(config.max_len, config.d_model));
        TransformerModel {
            config,
            params,
            names,
            layout,
            sinusoid,
        }
    }

    /// Rebuilds a model from named tensors, e.g. read from a checkpoint.
    /// Names and shapes must be exactly those `config` lays out.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        if named.len() != specs.len() {
            return Err(Error::Config(format!(
                "config expects {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name {
                return Err(Error::Config(format!(
                    "config expects parameter `{}`, found `{name}`",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self::assemble(config, layout, names, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Total number of stored scalars and the count per named tensor.
    /// Aliased tensors are stored, and therefore counted, once.
    pub fn count_params(&self) -> (usize, Vec<(String, usize)>) {
        let breakdown: Vec<(String, usize)> = self
            .named_params()
            .map(|(n, t)| (n.to_string(), t.numel()))
            .collect();
        (breakdown.iter().map(|(_, c)| c).sum(), breakdown)
    }

    pub fn cast<G: Scalar>(&self) -> TransformerModel<G> {
        TransformerModel::assemble(
            self.config.clone(),
            self.layout.clone(),
            self.names.clone(),
            self.params.iter().map(Tensor::cast).collect(),
        )
    }

    /// An equivalent model with independent encoder and decoder blocks,
    /// both initialised from the shared weights.
    pub fn to_unshared(&self) -> Result<TransformerModel<F>> {
        let mut config = self.config.clone();
        config.share_params = false;
        let (_, specs) = plan(&config);
        let named = specs
            .into_iter()
            .map(|s| {
                let source = s
                    .name
                    .strip_prefix("encoder.")
                    .or_else(|| s.name.strip_prefix("decoder."))
                    .filter(|rest| self.config.share_params && self.param_index(rest).is_some())
                    .unwrap_or(&s.name);
                let t = self
                    .param_by_name(source)
                    .ok_or_else(|| Error::Config(format!("no parameter `{source}` to copy")))?;
                Ok((s.name, t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        TransformerModel::from_named(config, named)
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// The fixed positional table when positions are not learned.
    pub(crate) fn sinusoid(&self) -> Option<&Tensor<F>> {
        self.sinusoid.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_len: 6,
            dropout: 0.0,
            share_params: false,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let a: TransformerModel = init_model(&tiny(), 3).unwrap();
        let b: TransformerModel = init_model(&tiny(), 3).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
        let c: TransformerModel = init_model(&tiny(), 4).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
        assert!(a.params().iter().all(Tensor::is_finite));
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 3,
            ..tiny()
        };
        assert!(matches!(init_model::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for share in [false, true] {
            for tie in [false, true] {
                for positional in [Positional::Learned, Positional::Sinusoidal] {
                    let cfg = ModelConfig {
                        share_params: share,
                        tie_output_embedding: tie,
                        positional,
                        ..tiny()
                    };
                    let m: TransformerModel = init_model(&cfg, 0).unwrap();
                    let enumerated: usize = m.params().iter().map(|t| t.data().len()).sum();
                    assert_eq!(m.count_params().0, enumerated);
                    assert_eq!(cfg.param_count(), enumerated);
                }
            }
        }
    }

    #[test]
    fn tiny_unshared_count_by_hand() {
        // tokens 40, positions 24, segments 8, encoder block
        // (attn 64 + ffn 32+8+32+4 + norms 16 = 156), decoder block 156,
        // cross attn 64 + cross norm 8, final norms 16, output 40.
        let m: TransformerModel = init_model(&tiny(), 0).unwrap();
        assert_eq!(m.count_params().0, 40 + 24 + 8 + 156 + 156 + 72 + 16 + 40);
    }

    #[test]
    fn sharing_and_tying_reduce_the_count() {
        let un: TransformerModel = init_model(&tiny(), 0).unwrap();
        let sh: TransformerModel = init_model(&ModelConfig { share_params: true, ..tiny() }, 0).unwrap();
        let tied: TransformerModel =
            init_model(&ModelConfig { tie_output_embedding: true, ..tiny() }, 0).unwrap();
        let cfg = tiny();
        assert_eq!(un.count_params().0 - sh.count_params().0, cfg.n_layers * cfg.shared_block_size());
        assert_eq!(un.count_params().0 - tied.count_params().0, cfg.vocab_size * cfg.d_model);
    }

    #[test]
    fn shared_layout_aliases_blocks() {
        let cfg = ModelConfig {
            share_params: true,
            n_layers: 3,
            ..tiny()
        };
        let m: TransformerModel = init_model(&cfg, 0).unwrap();
        for (enc, dec) in m.layout().encoder.iter().zip(&m.layout().decoder) {
            assert_eq!(*enc, dec.block);
            assert_ne!(dec.cross.wq, enc.attn.wq);
        }
        let names: std::collections::HashSet<_> = m.names().iter().collect();
        assert_eq!(names.len(), m.names().len());
    }

    #[test]
    fn unshared_twin_copies_weights() {
        let cfg = ModelConfig {
            share_params: true,
            n_layers: 2,
            ..tiny()
        };
        let m: TransformerModel = init_model(&cfg, 5).unwrap();
        let twin = m.to_unshared().unwrap();
        assert_eq!(
            twin.param_by_name("encoder.layers.1.ffn.w1"),
            m.param_by_name("layers.1.ffn.w1")
        );
        assert_eq!(
            twin.param_by_name("decoder.layers.1.ffn.w1"),
            m.param_by_name("layers.1.ffn.w1")
        );
        assert_eq!(twin.param_by_name("embed.tokens"), m.param_by_name("embed.tokens"));
    }

    #[test]
    fn from_named_rejects_a_foreign_layout() {
        let m: TransformerModel = init_model(&tiny(), 0).unwrap();
        let named: Vec<_> = m.named_params().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let shared = ModelConfig {
            share_params: true,
            ..tiny()
        };
        assert!(matches!(
            TransformerModel::from_named(shared, named.clone()),
            Err(Error::Config(_))
        ));
        assert!(TransformerModel::from_named(tiny(), named).is_ok());
    }
}
