use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, MASKED_LOGIT};

/// Boolean attention mask, `true` where a query may attend to a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    /// `(source_len, target_len)` when the keys are `[source ‖ target]`.
    key_layout: Option<(usize, usize)>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(AttentionMask {
            rows,
            cols,
            allowed,
            key_layout: None,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
            key_layout: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn key_layout(&self) -> Option<(usize, usize)> {
        self.key_layout
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    /// Fails if some query row cannot attend to any key.
    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 && self.rows > 0 {
            return Err(Error::Contract("attention mask has no keys".into()));
        }
        for r in 0..self.rows {
            if !self.row(r).iter().any(|&a| a) {
                return Err(Error::Contract(format!("attention mask row {r} is fully masked")));
            }
        }
        Ok(())
    }

    /// Logical AND. `other` may be a single row, which is applied to every
    /// query row.
    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if other.cols != self.cols || (other.rows != self.rows && other.rows != 1) {
            return Err(Error::Shape(format!(
                "cannot combine a {}x{} mask with a {}x{} mask",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let allowed = (0..self.rows)
            .flat_map(|r| {
                let o = if other.rows == 1 { 0 } else { r };
                self.row(r)
                    .iter()
                    .zip(other.row(o))
                    .map(|(&a, &b)| a && b)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(AttentionMask {
            rows: self.rows,
            cols: self.cols,
            allowed,
            key_layout: self.key_layout,
        })
    }

    /// Additive form: 0 where allowed, −1e9 elsewhere.
    pub fn to_additive<F: Scalar>(&self) -> Vec<F> {
        let masked = F::of_f64(MASKED_LOGIT);
        self.allowed
            .iter()
            .map(|&a| if a { F::zero() } else { masked })
            .collect()
    }

    /// Reorders key columns: column `j` of the result is column `perm[j]`.
    pub fn permute_keys(&self, perm: &[usize]) -> Self {
        let allowed = (0..self.rows)
            .flat_map(|r| perm.iter().map(move |&p| (r, p)))
            .map(|(r, p)| self.get(r, p))
            .collect();
        AttentionMask {
            rows: self.rows,
            cols: self.cols,
            allowed,
            key_layout: None,
        }
    }
}

/// Lower-triangular `m × m` mask.
pub fn build_causal_mask(m: usize) -> Result<AttentionMask> {
    if m == 0 {
        return Err(Error::Contract("causal mask needs at least one query".into()));
    }
    let allowed = (0..m).flat_map(|i| (0..m).map(move |j| j <= i)).collect();
    AttentionMask::new(m, m, allowed)
}

/// Pseudo-bidirectional mask over keys `[source 1..n ‖ target 1..m]`.
///
/// Query `i` (1-indexed, the position that predicts output token `i`) may
/// attend to the source keys `i+1..n`, which stand in for the not yet
/// generated future, and to the target keys `1..i`.
pub fn build_pbd_mask(n: usize, m: usize) -> Result<AttentionMask> {
    if m == 0 {
        return Err(Error::Contract("pseudo-bidirectional mask needs target_len >= 1".into()));
    }
    let mut allowed = Vec::with_capacity(m * (n + m));
    for i in 1..=m {
        allowed.extend((1..=n).map(|j| j > i));
        allowed.extend((1..=m).map(|j| j <= i));
    }
    Ok(AttentionMask {
        rows: m,
        cols: n + m,
        allowed,
        key_layout: Some((n, m)),
    })
}

/// One `1 × max_len` key mask per sequence, true for positions `< length`.
pub fn build_padding_mask(lengths: &[usize], max_len: usize) -> Result<Vec<AttentionMask>> {
    lengths
        .iter()
        .map(|&len| {
            if len > max_len {
                return Err(Error::Contract(format!(
                    "padding mask length {len} exceeds max_len {max_len}"
                )));
            }
            AttentionMask::new(1, max_len, (0..max_len).map(|p| p < len).collect())
        })
        .collect()
}

/// Key mask for a `[source ‖ target]` layout where only the first
/// `source_len` of `n_max` source slots hold real tokens.
pub fn source_padding_keys(source_len: usize, n_max: usize, m: usize) -> Result<AttentionMask> {
    let src = build_padding_mask(&[source_len], n_max)?.remove(0);
    let mut allowed = src.allowed;
    allowed.extend(std::iter::repeat_n(true, m));
    AttentionMask::new(1, n_max + m, allowed)
}

impl fmt::Display for AttentionMask {
    /// One row per line, `0`/`1` separated by spaces; a `|` separates the
    /// source block from the target block when the layout is known.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = self.key_layout.map(|(n, _)| n);
        for r in 0..self.rows {
            let mut cells: Vec<&str> = Vec::with_capacity(self.cols + 1);
            for c in 0..self.cols {
                if split == Some(c) {
                    cells.push("|");
                }
                cells.push(if self.get(r, c) { "1" } else { "0" });
            }
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}
