use crate::data::{source_ids, Example, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DecodeCache, EncoderStates, TransformerModel};
use crate::parallel::{self, ExecMode};
use crate::scalar::Scalar;

use super::metrics::EvalReport;

/// Default length-normalisation exponent.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// A decoded sequence. `tokens` excludes BOS and ends with EOS unless
/// decoding hit the step limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub truncated: bool,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
}

impl Decoded {
    /// Output tokens without the terminal EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn normalized_score(&self, alpha: f64) -> f64 {
        normalize(self.log_prob, self.tokens.len(), alpha)
    }
}

fn normalize(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        return log_prob;
    }
    log_prob / (len as f64).powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam { k: usize, alpha: f64 },
}

/// Log-softmax in 64-bit.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v.as_f64() - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_steps<F: Scalar>(model: &TransformerModel<F>, max_steps: usize) -> Result<()> {
    if max_steps == 0 || max_steps > model.config().max_len {
        return Err(Error::Contract(format!(
            "max_steps {max_steps} must lie in 1..={}",
            model.config().max_len
        )));
    }
    Ok(())
}

/// Picks the most probable next token at every step until EOS or
/// `max_steps` tokens.
pub fn greedy_decode<F: Scalar>(model: &TransformerModel<F>, source_ids: &[u32], max_steps: usize) -> Result<Decoded> {
    check_steps(model, max_steps)?;
    let enc = model.encode(source_ids)?;
    greedy_from(model, &enc, max_steps)
}

fn greedy_from<F: Scalar>(model: &TransformerModel<F>, enc: &EncoderStates<F>, max_steps: usize) -> Result<Decoded> {
    let mut cache = model.start_decode(enc)?;
    let mut prefix = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_steps {
        let lp = log_softmax(&model.decode_step(&mut cache, &prefix)?);
        let tok = argmax(&lp);
        log_prob += lp[tok];
        prefix.push(tok as u32);
        if tok as u32 == EOS {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    Ok(Decoded {
        truncated: tokens.last() != Some(&EOS),
        tokens,
        log_prob,
    })
}

struct Hyp<F> {
    prefix: Vec<u32>,
    log_prob: f64,
    cache: DecodeCache<F>,
}

/// Beam search scored by `log_prob / len^alpha`.
///
/// Each step expands every live hypothesis and keeps the `k` best
/// candidates (ranked by log-probability, then by the last token's
/// log-probability, then parent rank, then lowest token id). Candidates
/// ending in EOS are set aside as finished. Hypotheses still alive after
/// `max_steps` compete as truncated outputs. With `k = 1` this is exactly
/// [`greedy_decode`].
pub fn beam_search<F: Scalar>(
    model: &TransformerModel<F>,
    source_ids: &[u32],
    k: usize,
    alpha: f64,
    max_steps: usize,
) -> Result<Decoded> {
    if k == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    check_steps(model, max_steps)?;
    let enc = model.encode(source_ids)?;
    beam_from(model, &enc, k, alpha, max_steps)
}

fn beam_from<F: Scalar>(
    model: &TransformerModel<F>,
    enc: &EncoderStates<F>,
    k: usize,
    alpha: f64,
    max_steps: usize,
) -> Result<Decoded> {
    let mut alive = vec![Hyp {
        prefix: vec![BOS],
        log_prob: 0.0,
        cache: model.start_decode(enc)?,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..max_steps {
        if alive.is_empty() {
            break;
        }
        // (total, token log-prob, parent, token)
        let mut cands: Vec<(f64, f64, usize, u32)> = Vec::new();
        for (h, hyp) in alive.iter_mut().enumerate() {
            let lp = log_softmax(&model.decode_step(&mut hyp.cache, &hyp.prefix)?);
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (hyp.log_prob + l, l, h, t as u32)));
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        cands.truncate(k);
        let mut next = Vec::with_capacity(k);
        for (total, _, parent, tok) in cands {
            let mut prefix = alive[parent].prefix.clone();
            prefix.push(tok);
            if tok == EOS {
                finished.push(Decoded {
                    tokens: prefix[1..].to_vec(),
                    truncated: false,
                    log_prob: total,
                });
            } else {
                next.push(Hyp {
                    prefix,
                    log_prob: total,
                    cache: alive[parent].cache.clone(),
                });
            }
        }
        alive = next;
    }
    finished.extend(alive.into_iter().map(|h| Decoded {
        tokens: h.prefix[1..].to_vec(),
        truncated: true,
        log_prob: h.log_prob,
    }));
    let mut best = 0;
    for (i, d) in finished.iter().enumerate().skip(1) {
        let (s, b) = (d.normalized_score(alpha), finished[best].normalized_score(alpha));
        if s > b || (s == b && d.log_prob > finished[best].log_prob) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Decodes a single source with `strategy`.
pub fn decode<F: Scalar>(
    model: &TransformerModel<F>,
    source_ids: &[u32],
    strategy: Strategy,
    max_steps: usize,
) -> Result<Decoded> {
    match strategy {
        Strategy::Greedy => greedy_decode(model, source_ids, max_steps),
        Strategy::Beam { k, alpha } => beam_search(model, source_ids, k, alpha, max_steps),
    }
}

/// Decodes many sources, concurrently when `mode` allows. Output order
/// follows input order.
pub fn decode_all<F: Scalar>(
    model: &TransformerModel<F>,
    sources: &[Vec<u32>],
    strategy: Strategy,
    max_steps: usize,
    mode: ExecMode,
) -> Result<Vec<Decoded>> {
    parallel::map(mode, sources, |s| decode(model, s, strategy, max_steps))
        .into_iter()
        .collect()
}

/// Decodes raw strings to strings with `vocab`, allowing as many steps as
/// the model's `max_len`.
pub fn transduce<F: Scalar>(
    model: &TransformerModel<F>,
    vocab: &Vocab,
    inputs: &[&str],
    strategy: Strategy,
    mode: ExecMode,
) -> Result<Vec<String>> {
    let sources: Vec<Vec<u32>> = inputs.iter().map(|s| source_ids(vocab, s)).collect();
    let decoded = decode_all(model, &sources, strategy, model.config().max_len, mode)?;
    Ok(decoded.iter().map(|d| vocab.decode(d.content())).collect())
}

/// Exact match and CER of the model's outputs against `examples`.
pub fn evaluate<F: Scalar>(
    model: &TransformerModel<F>,
    vocab: &Vocab,
    examples: &[Example],
    strategy: Strategy,
    mode: ExecMode,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let inputs: Vec<&str> = examples.iter().map(|e| e.source.as_str()).collect();
    let hyps = transduce(model, vocab, &inputs, strategy, mode)?;
    let refs: Vec<&str> = examples.iter().map(|e| e.target.as_str()).collect();
    EvalReport::compute(&hyps, &refs)
}
