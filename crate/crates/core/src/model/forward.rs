//! Tape-based forward passes, used for training and as the reference
//! full-sequence decoder.

use rand_chacha::ChaCha8Rng;

use super::{AttnIds, BlockIds, CopyLayer, NormIds, TransformerModel};
use super::config::Activation;
use crate::attention::{build_causal_mask, build_pbd_mask, AttentionMask};
use crate::data::{Batch, BOS, PAD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AttentionBlock, Graph, Tensor, Var};

/// Dropout settings for one forward pass. [`Dropout::off`] gives the
/// deterministic evaluation path.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn apply<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Encoder representations of one source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates<F> {
    /// `L + 1` tensors of shape `[n × d]`: the embedded input, then the
    /// output of each encoder layer.
    pub states: Vec<Tensor<F>>,
    /// Final-normalised top layer, the cross-attention memory.
    pub memory: Tensor<F>,
}

impl<F: Scalar> EncoderStates<F> {
    pub fn source_len(&self) -> usize {
        self.memory.rows()
    }
}

/// Encoder representations of a packed group of sources, as tape nodes.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub states: Vec<Var>,
    pub memory: Var,
}

struct Packing {
    offsets: Vec<usize>,
    lengths: Vec<usize>,
    total: usize,
}

impl Packing {
    fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut total = 0;
        for &l in &lengths {
            offsets.push(total);
            total += l;
        }
        Packing {
            offsets,
            lengths,
            total,
        }
    }
}

impl<F: Scalar> TransformerModel<F> {
    fn validate_seqs<S: AsRef<[u32]>>(&self, seqs: &[S], what: &str) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Contract(format!("no {what} sequences")));
        }
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Contract(format!("empty {what} sequence")));
            }
            self.check_len(s.len())?;
            self.check_ids(s)?;
        }
        Ok(())
    }

    /// Token plus positional embedding of packed sequences.
    fn embed<S: AsRef<[u32]>>(&self, g: &mut Graph<'_, F>, seqs: &[S]) -> Result<Var> {
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
        let positions: Vec<u32> = seqs
            .iter()
            .flat_map(|s| 0..s.as_ref().len() as u32)
            .collect();
        let table = g.param(self.layout.tokens);
        let tok = g.embedding(table, &ids)?;
        let pos = match (self.layout.positions, self.sinusoid()) {
            (Some(p), _) => {
                let table = g.param(p);
                g.embedding(table, &positions)?
            }
            (None, Some(table)) => {
                let d = table.cols();
                let mut data = Vec::with_capacity(positions.len() * d);
                for &p in &positions {
                    data.extend_from_slice(table.row(p as usize));
                }
                g.constant(Tensor::from_parts(vec![positions.len(), d], data))
            }
            (None, None) => unreachable!("a model always has a positional encoding"),
        };
        g.add(tok, pos)
    }

    fn norm(&self, g: &mut Graph<'_, F>, x: Var, ids: NormIds) -> Result<Var> {
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        g.layer_norm(x, gain, bias, self.config.layer_norm_eps)
    }

    fn mha(
        &self,
        g: &mut Graph<'_, F>,
        ids: AttnIds,
        xq: Var,
        xkv: Var,
        blocks: Vec<AttentionBlock>,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv), g.param(ids.wo));
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let a = g.attention(q, k, v, self.config.n_heads, blocks)?;
        g.matmul(a, wo)
    }

    fn ffn(&self, g: &mut Graph<'_, F>, x: Var, ids: &BlockIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = match self.config.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        let h = g.matmul(h, w2)?;
        g.add_row(h, b2)
    }

    /// Pre-norm feed-forward sublayer with its residual connection.
    fn ffn_sublayer(&self, g: &mut Graph<'_, F>, x: Var, ids: &BlockIds, drop: &mut Dropout) -> Result<Var> {
        let h = self.norm(g, x, ids.norm2)?;
        let f = self.ffn(g, h, ids)?;
        let f = drop.apply(g, f);
        g.add(x, f)
    }

    /// Runs the encoder over packed `sources` on the tape.
    pub fn encode_graph<S: AsRef<[u32]>>(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[S],
        drop: &mut Dropout,
    ) -> Result<EncoderVars> {
        self.validate_seqs(sources, "source")?;
        let pack = Packing::new(sources);
        let blocks: Vec<AttentionBlock> = pack
            .offsets
            .iter()
            .zip(&pack.lengths)
            .map(|(&o, &n)| AttentionBlock {
                q_start: o,
                k_start: o,
                mask: AttentionMask::full(n, n),
            })
            .collect();
        let x = self.embed(g, sources)?;
        let mut x = drop.apply(g, x);
        let mut states = vec![x];
        for ids in &self.layout.encoder {
            let h = self.norm(g, x, ids.norm1)?;
            let a = self.mha(g, ids.attn, h, h, blocks.clone())?;
            let a = drop.apply(g, a);
            x = g.add(x, a)?;
            x = self.ffn_sublayer(g, x, ids, drop)?;
            states.push(x);
        }
        let memory = self.norm(g, x, self.layout.encoder_norm)?;
        Ok(EncoderVars { states, memory })
    }

    /// Teacher-forced decoder over packed `targets` (each starting with
    /// BOS), given the packed encoder output of the matching sources.
    /// Returns logits of shape `[Σm × V]`.
    pub fn decode_graph<T: AsRef<[u32]>>(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncoderVars,
        source_lengths: &[usize],
        targets: &[T],
        drop: &mut Dropout,
    ) -> Result<Var> {
        self.validate_seqs(targets, "target")?;
        if targets.iter().any(|t| t.as_ref()[0] != BOS) {
            return Err(Error::Contract("target input must begin with BOS".into()));
        }
        if source_lengths.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} sources for {} targets",
                source_lengths.len(),
                targets.len()
            )));
        }
        if enc.states.len() != self.config.n_layers + 1 {
            return Err(Error::Contract(format!(
                "expected {} encoder states, got {}",
                self.config.n_layers + 1,
                enc.states.len()
            )));
        }
        let src = Packing {
            offsets: source_lengths
                .iter()
                .scan(0, |acc, &n| {
                    let o = *acc;
                    *acc += n;
                    Some(o)
                })
                .collect(),
            lengths: source_lengths.to_vec(),
            total: source_lengths.iter().sum(),
        };
        if g.shape(enc.memory)[0] != src.total {
            return Err(Error::Shape(format!(
                "encoder memory has {} rows for {} source positions",
                g.shape(enc.memory)[0],
                src.total
            )));
        }
        let tgt = Packing::new(targets);
        let pbd = self.config.use_pbd;

        let mut self_blocks = Vec::with_capacity(targets.len());
        let mut cross_blocks = Vec::with_capacity(targets.len());
        // Row order of the self-attention keys: each example's copied
        // source rows directly followed by its decoder rows.
        let mut kv_order = Vec::new();
        for b in 0..targets.len() {
            let (so, n) = (src.offsets[b], src.lengths[b]);
            let (to, m) = (tgt.offsets[b], tgt.lengths[b]);
            if pbd {
                self_blocks.push(AttentionBlock {
                    q_start: to,
                    k_start: so + to,
                    mask: build_pbd_mask(n, m)?,
                });
                kv_order.extend(so..so + n);
                kv_order.extend(src.total + to..src.total + to + m);
            } else {
                self_blocks.push(AttentionBlock {
                    q_start: to,
                    k_start: to,
                    mask: build_causal_mask(m)?,
                });
            }
            cross_blocks.push(AttentionBlock {
                q_start: to,
                k_start: so,
                mask: AttentionMask::full(m, n),
            });
        }
        let dec_rows: Vec<usize> = (src.total..src.total + tgt.total).collect();

        let segments = self.layout.segments.map(|s| g.param(s));
        let seg = match segments {
            Some(s) => Some((g.gather_rows(s, &[0])?, g.gather_rows(s, &[1])?)),
            None => None,
        };

        let x = self.embed(g, targets)?;
        let mut x = drop.apply(g, x);
        for (l, ids) in self.layout.decoder.iter().enumerate() {
            if let Some((generated, _)) = seg {
                x = g.add_row(x, generated)?;
            }
            let a = if pbd {
                let copy_index = match self.config.copy_layer {
                    CopyLayer::Input => l,
                    CopyLayer::Output => l + 1,
                };
                let mut copied = enc.states[copy_index];
                if let Some((_, c)) = seg {
                    copied = g.add_row(copied, c)?;
                }
                let joint = g.concat_rows(copied, x)?;
                let h = self.norm(g, joint, ids.block.norm1)?;
                let hq = g.gather_rows(h, &dec_rows)?;
                let hkv = g.gather_rows(h, &kv_order)?;
                self.mha(g, ids.block.attn, hq, hkv, self_blocks.clone())?
            } else {
                let h = self.norm(g, x, ids.block.norm1)?;
                self.mha(g, ids.block.attn, h, h, self_blocks.clone())?
            };
            let a = drop.apply(g, a);
            x = g.add(x, a)?;

            let h = self.norm(g, x, ids.cross_norm)?;
            let c = self.mha(g, ids.cross, h, enc.memory, cross_blocks.clone())?;
            let c = drop.apply(g, c);
            x = g.add(x, c)?;

            x = self.ffn_sublayer(g, x, &ids.block, drop)?;
        }
        let h = self.norm(g, x, self.layout.decoder_norm)?;
        self.project(g, h)
    }

    fn project(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        match self.layout.output {
            Some(w) => {
                let w = g.param(w);
                g.matmul(h, w)
            }
            None => {
                let table = g.param(self.layout.tokens);
                g.matmul_nt(h, table)
            }
        }
    }

    /// Encoder and teacher-forced decoder in one tape.
    pub fn forward_graph<S: AsRef<[u32]>, T: AsRef<[u32]>>(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[S],
        targets: &[T],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let enc = self.encode_graph(g, sources, drop)?;
        let lengths: Vec<usize> = sources.iter().map(|s| s.as_ref().len()).collect();
        self.decode_graph(g, &enc, &lengths, targets, drop)
    }

    /// Mean label-smoothed cross-entropy per target token of `batch`.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, F>,
        batch: &Batch,
        smoothing: f64,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let sources: Vec<&[u32]> = (0..batch.len()).map(|r| batch.source(r)).collect();
        let inputs: Vec<&[u32]> = (0..batch.len()).map(|r| batch.target_input(r)).collect();
        let outputs: Vec<u32> = (0..batch.len())
            .flat_map(|r| batch.target_output(r).iter().copied())
            .collect();
        let logits = self.forward_graph(g, &sources, &inputs, drop)?;
        let total = g.cross_entropy(logits, &outputs, PAD, smoothing)?;
        let count = outputs.iter().filter(|&&t| t != PAD).count();
        Ok(g.scale(total, F::one() / F::of_f64(count as f64)))
    }

    /// Encoder states of one source sequence.
    pub fn encode(&self, source_ids: &[u32]) -> Result<EncoderStates<F>> {
        let mut g = Graph::new(&self.params, false);
        let vars = self.encode_graph(&mut g, &[source_ids], &mut Dropout::off())?;
        Ok(EncoderStates {
            states: vars.states.iter().map(|&v| g.value(v).clone()).collect(),
            memory: g.value(vars.memory).clone(),
        })
    }

    /// Logits `[m × V]` for every position of a teacher-forced target.
    pub fn decode_parallel(&self, enc: &EncoderStates<F>, target_input_ids: &[u32]) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.params, false);
        let vars = EncoderVars {
            states: enc.states.iter().map(|s| g.constant(s.clone())).collect(),
            memory: g.constant(enc.memory.clone()),
        };
        let logits = self.decode_graph(
            &mut g,
            &vars,
            &[enc.source_len()],
            &[target_input_ids],
            &mut Dropout::off(),
        )?;
        Ok(g.value(logits).clone())
    }

    /// `decode_parallel(encode(source), target)`.
    pub fn logits(&self, source_ids: &[u32], target_input_ids: &[u32]) -> Result<Tensor<F>> {
        let enc = self.encode(source_ids)?;
        self.decode_parallel(&enc, target_input_ids)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig};
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 12,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_states_have_expected_shapes() {
        let m: TransformerModel = init_model(&cfg(), 1).unwrap();
        let enc = m.encode(&[5]).unwrap();
        assert_eq!(enc.states.len(), 3);
        assert!(enc.states.iter().all(|s| s.shape() == [1, 8]));
        let enc = m.encode(&[5, 6, 7]).unwrap();
        assert!(enc.states.iter().all(|s| s.shape() == [3, 8]));
        assert_eq!(m.encode(&[5, 6, 7]).unwrap(), enc);
    }

    #[test]
    fn swapping_tokens_changes_top_states() {
        let m: TransformerModel = init_model(&cfg(), 2).unwrap();
        let a = m.encode(&[4, 5, 6, 2]).unwrap();
        let b = m.encode(&[5, 4, 6, 2]).unwrap();
        assert!(a.states[2].max_abs_diff(&b.states[2]) > 1e-4);
    }

    #[test]
    fn overlong_source_is_a_length_error() {
        let m: TransformerModel = init_model(&cfg(), 0).unwrap();
        let long = vec![4u32; 13];
        assert!(matches!(m.encode(&long), Err(Error::Length { len: 13, max: 12 })));
    }

    #[test]
    fn missing_bos_is_a_contract_error() {
        let m: TransformerModel = init_model(&cfg(), 0).unwrap();
        let enc = m.encode(&[4, 5, 2]).unwrap();
        assert!(matches!(m.decode_parallel(&enc, &[4, 5]), Err(Error::Contract(_))));
    }

    #[test]
    fn packed_batch_equals_separate_examples() {
        let m: TransformerModel<f64> = init_model(&cfg(), 3).unwrap();
        let sources: Vec<Vec<u32>> = vec![vec![4, 5, 6, 2], vec![7, 2], vec![8, 4, 4, 5, 6, 2]];
        let targets: Vec<Vec<u32>> = vec![vec![1, 4, 5], vec![1, 7, 7, 8], vec![1]];
        let mut g = Graph::new(m.params(), false);
        let packed = m.forward_graph(&mut g, &sources, &targets, &mut Dropout::off()).unwrap();
        let packed = g.value(packed).clone();
        let mut row = 0;
        for (s, t) in sources.iter().zip(&targets) {
            let single = m.logits(s, t).unwrap();
            for i in 0..t.len() {
                for (a, b) in single.row(i).iter().zip(packed.row(row)) {
                    assert!((a - b).abs() < 1e-12);
                }
                row += 1;
            }
        }
    }

    #[test]
    fn zero_segment_table_equals_no_segments() {
        let with: TransformerModel = init_model(&cfg(), 4).unwrap();
        let mut zeroed = with.clone();
        let s = zeroed.layout().segments.unwrap();
        zeroed.params_mut()[s].data_mut().fill(0.0);
        let plain_cfg = ModelConfig {
            use_segment: false,
            ..cfg()
        };
        let named = with
            .named_params()
            .filter(|(n, _)| *n != "embed.segments")
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let plain = TransformerModel::from_named(plain_cfg, named).unwrap();
        let (src, tgt) = ([4, 5, 6, 7, 2], [1, 4, 5, 6]);
        assert_eq!(zeroed.logits(&src, &tgt).unwrap(), plain.logits(&src, &tgt).unwrap());
        assert_ne!(with.logits(&src, &tgt).unwrap(), plain.logits(&src, &tgt).unwrap());
    }

    #[test]
    fn dropout_changes_the_loss_only_when_enabled() {
        let c = ModelConfig { dropout: 0.3, ..cfg() };
        let m: TransformerModel<f64> = init_model(&c, 5).unwrap();
        let ex = [crate::data::Example::new("abc", "abd").unwrap()];
        let vocab = crate::data::Vocab::from_alphabet("abcde").unwrap();
        let batch = Batch::from_examples(&[&ex[0]], &vocab);
        let eval = |drop: &mut Dropout| {
            let mut g = Graph::new(m.params(), false);
            let l = m.loss_graph(&mut g, &batch, 0.0, drop).unwrap();
            g.value(l).item().unwrap()
        };
        let a = eval(&mut Dropout::off());
        let b = eval(&mut Dropout::off());
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = eval(&mut Dropout::new(0.3, &mut rng));
        assert_ne!(a, c);
    }
}
