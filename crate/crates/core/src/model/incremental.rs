//! Step-by-step decoding with cached keys and values.
//!
//! At step `t` the self-attention of each decoder layer sees the cached
//! decoder keys for positions `1..=t` and the copied encoder keys for
//! source positions `t+1..n`, so one step costs `O(t + n)` attention work.

use super::config::Activation;
use super::{AttnIds, CopyLayer, EncoderStates, NormIds, TransformerModel};
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::parallel::ExecMode;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone)]
struct LayerCache<F> {
    copy_k: Vec<F>,
    copy_v: Vec<F>,
    cross_k: Vec<F>,
    cross_v: Vec<F>,
    self_k: Vec<F>,
    self_v: Vec<F>,
}

/// Per-layer keys and values for one source sequence and the target
/// prefix decoded so far.
#[derive(Debug, Clone)]
pub struct DecodeCache<F> {
    layers: Vec<LayerCache<F>>,
    source_len: usize,
    len: usize,
}

impl<F: Scalar> DecodeCache<F> {
    /// Number of target positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Overwrites the cached copied keys and values with zeros; a test
    /// hook for checking which steps read the copy region.
    #[doc(hidden)]
    pub fn clear_copy_region(&mut self) {
        for l in &mut self.layers {
            l.copy_k.fill(F::zero());
            l.copy_v.fill(F::zero());
        }
    }
}

/// `x[rows × k] · w[k × n]`
fn linear<F: Scalar>(x: &[F], w: &Tensor<F>) -> Vec<F> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / k;
    let mut out = vec![F::zero(); rows * n];
    kernels::gemm(ExecMode::Sequential, rows, k, n, x, w.data(), &mut out);
    out
}

fn add_into<F: Scalar>(x: &mut [F], y: &[F]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a += b);
}

impl<F: Scalar> TransformerModel<F> {
    fn p(&self, i: usize) -> &Tensor<F> {
        &self.params[i]
    }

    fn norm_rows(&self, x: &[F], ids: NormIds) -> Vec<F> {
        let mut out = vec![F::zero(); x.len()];
        kernels::layer_norm_rows(
            x,
            self.config.d_model,
            self.p(ids.gain).data(),
            self.p(ids.bias).data(),
            F::of_f64(self.config.layer_norm_eps),
            &mut out,
            None,
            None,
        );
        out
    }

    /// Attention of the single query row `q` over keys/values `k`, `v`.
    fn attend_row(&self, q: &[F], k: &[F], v: &[F], wo: usize) -> Vec<F> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let mk = k.len() / d;
        let allowed = vec![true; mk];
        let mut probs = vec![F::zero(); mk];
        let mut out = vec![F::zero(); d];
        for h in 0..heads {
            kernels::attend_head(q, k, v, d, h * dh, dh, &allowed, &mut probs, &mut out);
        }
        linear(&out, self.p(wo))
    }

    /// Prepares a cache for decoding against `enc`: the copied keys and
    /// values of every layer and the cross-attention memory projections.
    pub fn start_decode(&self, enc: &EncoderStates<F>) -> Result<DecodeCache<F>> {
        let l_count = self.config.n_layers;
        if enc.states.len() != l_count + 1 {
            return Err(Error::Contract(format!(
                "expected {} encoder states, got {}",
                l_count + 1,
                enc.states.len()
            )));
        }
        let d = self.config.d_model;
        let n = enc.source_len();
        let seg1 = self.layout.segments.map(|s| &self.p(s).data()[d..2 * d]);
        let layers = self
            .layout
            .decoder
            .iter()
            .enumerate()
            .map(|(l, ids)| {
                let (copy_k, copy_v) = if self.config.use_pbd {
                    let index = match self.config.copy_layer {
                        CopyLayer::Input => l,
                        CopyLayer::Output => l + 1,
                    };
                    let mut copied = enc.states[index].data().to_vec();
                    if let Some(seg) = seg1 {
                        copied.chunks_exact_mut(d).for_each(|r| add_into(r, seg));
                    }
                    let h = self.norm_rows(&copied, ids.block.norm1);
                    (linear(&h, self.p(ids.block.attn.wk)), linear(&h, self.p(ids.block.attn.wv)))
                } else {
                    (Vec::new(), Vec::new())
                };
                LayerCache {
                    copy_k,
                    copy_v,
                    cross_k: linear(enc.memory.data(), self.p(ids.cross.wk)),
                    cross_v: linear(enc.memory.data(), self.p(ids.cross.wv)),
                    self_k: Vec::new(),
                    self_v: Vec::new(),
                }
            })
            .collect();
        Ok(DecodeCache {
            layers,
            source_len: n,
            len: 0,
        })
    }

    /// Logits for the position after `prefix_ids`, consuming the last
    /// prefix token. The cache must hold exactly the earlier ones.
    pub fn decode_step(&self, cache: &mut DecodeCache<F>, prefix_ids: &[u32]) -> Result<Vec<F>> {
        let t = prefix_ids.len();
        if t == 0 || prefix_ids[0] != BOS {
            return Err(Error::Contract("decode prefix must begin with BOS".into()));
        }
        if cache.len + 1 != t {
            return Err(Error::Contract(format!(
                "cache holds {} positions but the prefix has {t}",
                cache.len
            )));
        }
        self.check_len(t)?;
        let id = prefix_ids[t - 1];
        self.check_ids(&[id])?;
        let d = self.config.d_model;
        let pos = t - 1;

        let mut x = self.p(self.layout.tokens).row(id as usize).to_vec();
        match (self.layout.positions, self.sinusoid()) {
            (Some(p), _) => add_into(&mut x, self.p(p).row(pos)),
            (None, Some(table)) => add_into(&mut x, table.row(pos)),
            (None, None) => unreachable!("a model always has a positional encoding"),
        }
        let seg0 = self.layout.segments.map(|s| &self.p(s).data()[..d]);
        // Source positions t+1..n (1-based) form the copy region.
        let copy_from = t.min(cache.source_len);

        for (ids, lc) in self.layout.decoder.iter().zip(&mut cache.layers) {
            let attn: AttnIds = ids.block.attn;
            if let Some(seg) = seg0 {
                add_into(&mut x, seg);
            }
            let h = self.norm_rows(&x, ids.block.norm1);
            let q = linear(&h, self.p(attn.wq));
            lc.self_k.extend(linear(&h, self.p(attn.wk)));
            lc.self_v.extend(linear(&h, self.p(attn.wv)));
            let (k, v) = if self.config.use_pbd {
                let mut k = lc.copy_k[copy_from * d..].to_vec();
                let mut v = lc.copy_v[copy_from * d..].to_vec();
                k.extend_from_slice(&lc.self_k);
                v.extend_from_slice(&lc.self_v);
                (k, v)
            } else {
                (lc.self_k.clone(), lc.self_v.clone())
            };
            add_into(&mut x, &self.attend_row(&q, &k, &v, attn.wo));

            let h = self.norm_rows(&x, ids.cross_norm);
            let q = linear(&h, self.p(ids.cross.wq));
            add_into(&mut x, &self.attend_row(&q, &lc.cross_k, &lc.cross_v, ids.cross.wo));

            let h = self.norm_rows(&x, ids.block.norm2);
            let mut f = linear(&h, self.p(ids.block.w1));
            add_into(&mut f, self.p(ids.block.b1).data());
            match self.config.activation {
                Activation::Relu => f.iter_mut().for_each(|v| *v = v.max(F::zero())),
                Activation::Gelu => f.iter_mut().for_each(|v| *v = kernels::gelu(*v)),
            }
            let mut f = linear(&f, self.p(ids.block.w2));
            add_into(&mut f, self.p(ids.block.b2).data());
            add_into(&mut x, &f);
        }
        cache.len += 1;
        let h = self.norm_rows(&x, self.layout.decoder_norm);
        Ok(match self.layout.output {
            Some(w) => linear(&h, self.p(w)),
            None => {
                let table = self.p(self.layout.tokens);
                let v = table.rows();
                let mut out = vec![F::zero(); v];
                kernels::gemm_nt(ExecMode::Sequential, 1, d, v, &h, table.data(), &mut out);
                out
            }
        })
    }
}
