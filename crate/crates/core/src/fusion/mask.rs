use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};

/// `2T x 2T` admissibility over the concatenated `[H^F; H^B]` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionMask {
    seq_len: usize,
    admissible: Rc<[bool]>,
}

/// Builds the Janus fusion mask for sequences of length `seq_len`.
///
/// Forward rows see forward keys at or before themselves and backward keys
/// at least two positions to their right; backward rows mirror this.
pub fn build_mask(seq_len: usize) -> Result<FusionMask> {
    FusionMask::with_gap(seq_len, 2)
}

impl FusionMask {
    /// Same four cases with the cross-direction offset `+2` replaced by
    /// `gap`. Only `gap = 2` is leak-free; other values exist for mutation
    /// testing.
    pub fn with_gap(seq_len: usize, gap: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Invalid(format!("fusion mask needs T >= 2, got {seq_len}")));
        }
        Ok(Self::build(seq_len, gap))
    }

    /// No length check; `T = 1` gives the trivial two-row mask used when
    /// predicting from a one-token prefix.
    pub(crate) fn build(seq_len: usize, gap: usize) -> Self {
        let t = seq_len;
        let n = 2 * t;
        let mut admissible = vec![false; n * n];
        for q in 0..n {
            for kv in 0..n {
                admissible[q * n + kv] = (q < t && kv < t && q >= kv)
                    || (q >= t && kv >= t && q <= kv)
                    || (q < t && kv >= t && kv >= t + q + gap)
                    || (q >= t && kv < t && q >= kv + t + gap);
            }
        }
        Self { seq_len, admissible: admissible.into() }
    }

    /// Every entry admissible, for the masked-LM baseline's full attention.
    pub fn full(seq_len: usize) -> Self {
        let n = 2 * seq_len;
        Self { seq_len, admissible: vec![true; n * n].into() }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Side length `2T`.
    pub fn size(&self) -> usize {
        2 * self.seq_len
    }

    pub fn get(&self, q: usize, kv: usize) -> bool {
        self.admissible[q * self.size() + kv]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        let n = self.size();
        &self.admissible[q * n..(q + 1) * n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.admissible
    }

    pub fn shared(&self) -> Rc<[bool]> {
        Rc::clone(&self.admissible)
    }

    /// Rows of `0`/`1` separated by single spaces.
    pub fn to_text(&self) -> String {
        let n = self.size();
        let mut s = String::with_capacity(n * n * 2);
        for q in 0..n {
            for kv in 0..n {
                if kv > 0 {
                    s.push(' ');
                }
                s.push(if self.get(q, kv) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    /// Plain (ASCII) portable bitmap; admissible entries are black.
    pub fn to_pbm(&self) -> String {
        let n = self.size();
        let mut s = String::new();
        let _ = writeln!(s, "P1\n{n} {n}");
        s.push_str(&self.to_text());
        s
    }
}
