//! Boolean attention visibility matrix.
//!
//! Masks are how training simulates cache eviction: a position that would
//! have been evicted at decode time is simply never visible to later rows.
//! Row/column indices are *original* sequence slots, so masking a column
//! keeps the positional geometry of the surviving entries untouched.

use crate::num::Num;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    /// Row-major: `allowed[row * n + col]` means row may attend to col.
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Standard lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |row, col| col <= row)
    }

    /// Build from a predicate.  Panics if the predicate tries to break
    /// causality (col > row) or to hide a row from itself — both are
    /// construction bugs, not runtime conditions.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for row in 0..n {
            for col in 0..n {
                let a = f(row, col);
                if a {
                    assert!(col <= row, "mask allows future position: row {row} col {col}");
                }
                allowed[row * n + col] = a;
            }
            assert!(allowed[row * n + row], "mask hides row {row} from itself");
        }
        AttentionMask { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.n + col]
    }

    /// Number of visible columns in a row (the decode-time cache occupancy
    /// this row corresponds to).
    pub fn visible_count(&self, row: usize) -> usize {
        self.allowed[row * self.n..(row + 1) * self.n]
            .iter()
            .filter(|&&a| a)
            .count()
    }

    /// Additive form: 0 where visible, -inf where hidden.  Adding this to
    /// attention scores and running a masked softmax makes hidden entries
    /// contribute exactly 0.
    pub fn to_additive<S: Num>(&self) -> Vec<S> {
        self.allowed
            .iter()
            .map(|&a| if a { S::zero() } else { S::neg_infinity() })
            .collect()
    }
}
