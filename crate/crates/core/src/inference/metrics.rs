use serde::Serialize;

use crate::error::{Error, Result};

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of hypotheses equal to their reference.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Contract("exact match over an empty set".into()));
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h.as_ref() == r.as_ref()).count();
    Ok(hits as f64 / refs.len() as f64)
}

/// Total edit distance divided by total reference length.
pub fn char_error_rate<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut edits = 0;
    let mut chars = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let r = r.as_ref();
        if r.is_empty() {
            return Err(Error::Contract("character error rate needs non-empty references".into()));
        }
        edits += levenshtein(h.as_ref(), r);
        chars += r.chars().count();
    }
    if chars == 0 {
        return Err(Error::Contract("character error rate over an empty set".into()));
    }
    Ok(edits as f64 / chars as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub exact_match: f64,
    pub cer: f64,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<Self> {
        Ok(EvalReport {
            exact_match: exact_match(hyps, refs)?,
            cer: char_error_rate(hyps, refs)?,
            n_examples: refs.len(),
        })
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "exact_match: {:.6}", self.exact_match)?;
        writeln!(f, "cer: {:.6}", self.cer)?;
        writeln!(f, "n_examples: {}", self.n_examples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Plain recursive definition, memoised.
    fn lev_oracle(a: &[char], b: &[char], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let cost = usize::from(a[0] != b[0]);
        let v = (lev_oracle(&a[1..], &b[1..], memo) + cost)
            .min(lev_oracle(&a[1..], b, memo) + 1)
            .min(lev_oracle(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(exact_match(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(exact_match(&["ab", "cd"], &["ab", "ce"]).unwrap(), 0.5);
        assert!(exact_match(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn cer_examples() {
        assert_eq!(char_error_rate(&["abc"], &["abc"]).unwrap(), 0.0);
        assert!((char_error_rate(&["abc"], &["abd"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(char_error_rate(&[""], &["abc"]).unwrap(), 1.0);
        assert!(char_error_rate(&["x"], &[""]).is_err());
    }

    #[test]
    fn report_format() {
        let r = EvalReport::compute(&["ab", "cd"], &["ab", "ce"]).unwrap();
        assert_eq!(r.to_string(), "exact_match: 0.500000\ncer: 0.250000\nn_examples: 2\n");
    }

    proptest! {
        #[test]
        fn levenshtein_matches_recursive_definition(a in "[abc]{0,7}", b in "[abc]{0,7}") {
            let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(levenshtein(&a, &b), lev_oracle(&ca, &cb, &mut Default::default()));
        }
    }
}
