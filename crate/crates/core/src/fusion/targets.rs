use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::mask::FusionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Half {
    Forward,
    Backward,
}

/// One prediction: fused row `row` predicts original position `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instance {
    pub row: usize,
    pub target: usize,
    pub half: Half,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMap {
    pub seq_len: usize,
    pub instances: Vec<Instance>,
}

/// Forward row `i` predicts `i + 1`; backward row `T + j` predicts `j - 1`.
pub fn target_map(seq_len: usize) -> Result<TargetMap> {
    if seq_len < 2 {
        return Err(Error::Invalid(format!("target map needs T >= 2, got {seq_len}")));
    }
    let t = seq_len;
    let fwd = (0..t - 1).map(|i| Instance { row: i, target: i + 1, half: Half::Forward });
    let bwd = (1..t).map(|j| Instance { row: t + j, target: j - 1, half: Half::Backward });
    Ok(TargetMap { seq_len, instances: fwd.chain(bwd).collect() })
}

impl TargetMap {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.row).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.target).collect()
    }
}

/// Input positions reaching each fused row, found by following the
/// encoder dependency graph through every admissible key.
///
/// Forward state `i` depends on `0..=i`, backward state `j` on `j..T`.
pub fn influence_oracle(mask: &FusionMask) -> Vec<BTreeSet<usize>> {
    let t = mask.seq_len();
    let depends = |kv: usize| -> std::ops::Range<usize> {
        if kv < t {
            0..kv + 1
        } else {
            kv - t..t
        }
    };
    (0..2 * t)
        .map(|q| {
            let mut set = BTreeSet::new();
            for kv in (0..2 * t).filter(|&kv| mask.get(q, kv)) {
                set.extend(depends(kv));
            }
            set
        })
        .collect()
}
