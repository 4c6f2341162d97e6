use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

/// Per-character edit probabilities for synthetic misspellings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub p_swap: f64,
    pub alphabet: Vec<char>,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn lowercase_latin(p_sub: f64, p_del: f64, p_ins: f64, p_swap: f64, seed: u64) -> Self {
        CorruptionConfig {
            p_sub,
            p_del,
            p_ins,
            p_swap,
            alphabet: ('a'..='z').collect(),
            seed,
        }
    }

    /// Splits a total edit rate over substitution, deletion, insertion and
    /// swap in the proportions 4:2:2:1.
    pub fn with_total(total: f64, seed: u64) -> Self {
        let unit = total / 9.0;
        Self::lowercase_latin(4.0 * unit, 2.0 * unit, 2.0 * unit, unit, seed)
    }

    pub fn total(&self) -> f64 {
        self.p_sub + self.p_del + self.p_ins + self.p_swap
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_sub", self.p_sub),
            ("p_del", self.p_del),
            ("p_ins", self.p_ins),
            ("p_swap", self.p_swap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.total() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "edit probabilities sum to {} > 1",
                self.total()
            )));
        }
        if (self.p_sub > 0.0 || self.p_ins > 0.0) && self.alphabet.is_empty() {
            return Err(Error::Config("substitution/insertion need a non-empty alphabet".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Applies independent per-position edits to `word`.
///
/// At each original position one of substitution, deletion, insertion
/// (before the character) or a swap with the next character happens with
/// the configured probabilities, otherwise the character is kept.
pub fn corrupt_word<R: Rng>(word: &str, config: &CorruptionConfig, rng: &mut R) -> String {
    let chars: Vec<char> = word.chars().collect();
    let mut out = String::with_capacity(word.len() + 2);
    let (t_sub, t_del, t_ins) = (
        config.p_sub,
        config.p_sub + config.p_del,
        config.p_sub + config.p_del + config.p_ins,
    );
    let t_swap = t_ins + config.p_swap;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let u: f64 = rng.random();
        if u < t_sub {
            out.push(random_other(c, &config.alphabet, rng));
        } else if u < t_del {
        } else if u < t_ins {
            out.push(*config.alphabet.choose(rng).expect("validated alphabet"));
            out.push(c);
        } else if u < t_swap && i + 1 < chars.len() {
            out.push(chars[i + 1]);
            out.push(c);
            i += 2;
            continue;
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

fn random_other<R: Rng>(c: char, alphabet: &[char], rng: &mut R) -> char {
    let others: Vec<char> = alphabet.iter().copied().filter(|&a| a != c).collect();
    others.choose(rng).copied().unwrap_or(c)
}

/// Draws `count` words uniformly from `words` and pairs each corrupted copy
/// (source) with the clean word (target).
pub fn synthesize(words: &[String], count: usize, config: &CorruptionConfig) -> Result<Vec<Example>> {
    config.validate()?;
    if words.is_empty() {
        return Err(Error::Data("word list is empty".into()));
    }
    let mut rng = config.rng();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let word = words.choose(&mut rng).expect("non-empty");
        // a word can lose every character; redraw a few times before keeping it clean
        let mut source = String::new();
        for _ in 0..8 {
            source = corrupt_word(word, config, &mut rng);
            if !source.is_empty() {
                break;
            }
        }
        if source.is_empty() {
            source = word.clone();
        }
        out.push(Example::new(source, word.clone())?);
    }
    Ok(out)
}
