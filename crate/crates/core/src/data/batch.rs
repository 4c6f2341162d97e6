use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Padded id matrices for a group of examples.
///
/// Sources end with EOS. `target_input` is BOS followed by the target and
/// `target_output` is the target followed by EOS, so the input is the
/// output shifted right by one position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source_ids: Vec<Vec<u32>>,
    pub target_input_ids: Vec<Vec<u32>>,
    pub target_output_ids: Vec<Vec<u32>>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
}

/// Source ids with the terminal EOS.
pub fn source_ids(vocab: &Vocab, s: &str) -> Vec<u32> {
    let mut ids = vocab.encode(s);
    ids.push(EOS);
    ids
}

/// `(BOS + target, target + EOS)`.
pub fn target_ids(vocab: &Vocab, s: &str) -> (Vec<u32>, Vec<u32>) {
    let ids = vocab.encode(s);
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(&ids);
    let mut output = ids;
    output.push(EOS);
    (input, output)
}

fn pad_to(mut v: Vec<u32>, len: usize) -> Vec<u32> {
    v.resize(len, PAD);
    v
}

impl Batch {
    pub fn from_examples(examples: &[&Example], vocab: &Vocab) -> Batch {
        let src: Vec<Vec<u32>> = examples.iter().map(|e| source_ids(vocab, &e.source)).collect();
        let tgt: Vec<(Vec<u32>, Vec<u32>)> = examples.iter().map(|e| target_ids(vocab, &e.target)).collect();
        let n_max = src.iter().map(Vec::len).max().unwrap_or(0);
        let m_max = tgt.iter().map(|t| t.0.len()).max().unwrap_or(0);
        let source_lengths = src.iter().map(Vec::len).collect();
        let target_lengths = tgt.iter().map(|t| t.0.len()).collect();
        let (ti, to): (Vec<_>, Vec<_>) = tgt
            .into_iter()
            .map(|(i, o)| (pad_to(i, m_max), pad_to(o, m_max)))
            .unzip();
        Batch {
            source_ids: src.into_iter().map(|s| pad_to(s, n_max)).collect(),
            target_input_ids: ti,
            target_output_ids: to,
            source_lengths,
            target_lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn source(&self, row: usize) -> &[u32] {
        &self.source_ids[row][..self.source_lengths[row]]
    }

    pub fn target_input(&self, row: usize) -> &[u32] {
        &self.target_input_ids[row][..self.target_lengths[row]]
    }

    pub fn target_output(&self, row: usize) -> &[u32] {
        &self.target_output_ids[row][..self.target_lengths[row]]
    }

    /// Number of non-padding target positions.
    pub fn token_count(&self) -> usize {
        self.target_lengths.iter().sum()
    }
}

/// Shuffles `examples` deterministically with `seed` and groups them into
/// batches of `batch_size` (the last one may be smaller).
pub fn make_batches(
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    for ex in examples {
        let longest = ex.source.chars().count().max(ex.target.chars().count()) + 1;
        if longest > max_len {
            return Err(Error::Data(format!(
                "example {:?} -> {:?} needs {longest} positions but max_len is {max_len}",
                ex.source, ex.target
            )));
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let group: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&group, vocab)
        })
        .collect())
}
