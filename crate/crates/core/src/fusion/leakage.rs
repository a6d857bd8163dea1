use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{JanusModel, ModelConfig};
use crate::numerics::Real;

use super::mask::{build_mask, FusionMask};
use super::targets::target_map;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakageViolation {
    pub target: usize,
    pub substitute: usize,
    pub row: usize,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub seq_len: usize,
    pub checks: usize,
    pub max_diff: f64,
    pub tolerance: f64,
    pub violations: Vec<LeakageViolation>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random model from `config` (seeded by `config.seed`) on a random
/// `{A,C,G,T}` sequence of length `seq_len`, checked against the Janus mask.
pub fn leakage_check<F: Real>(config: &ModelConfig, seq_len: usize, tolerance: f64) -> Result<LeakageReport> {
    let model = JanusModel::<F>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c65616b);
    let ids: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..4)).collect();
    leakage_check_with_mask(&model, &ids, &build_mask(seq_len)?, tolerance)
}

/// For every target position `t` and every vocabulary id `v != x_t`,
/// replaces `x_t` by `v` and measures how far the logits of each row
/// predicting `t` move.
pub fn leakage_check_with_mask<F: Real>(
    model: &JanusModel<F>,
    ids: &[usize],
    mask: &FusionMask,
    tolerance: f64,
) -> Result<LeakageReport> {
    let seq_len = ids.len();
    let map = target_map(seq_len)?;
    let base = model.fused_logits(ids, Some(mask))?;
    let mut report = LeakageReport { seq_len, checks: 0, max_diff: 0.0, tolerance, violations: Vec::new() };
    for t in 0..seq_len {
        let rows: Vec<usize> = map.instances.iter().filter(|i| i.target == t).map(|i| i.row).collect();
        for v in (0..model.config.vocab_size).filter(|&v| v != ids[t]) {
            let mut changed = ids.to_vec();
            changed[t] = v;
            let logits = model.fused_logits(&changed, Some(mask))?;
            for &row in &rows {
                let diff = base
                    .row(row)
                    .iter()
                    .zip(logits.row(row))
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                    .fold(0.0, f64::max);
                report.checks += 1;
                report.max_diff = report.max_diff.max(diff);
                if diff > tolerance {
                    report.violations.push(LeakageViolation { target: t, substitute: v, row, diff });
                }
            }
        }
    }
    Ok(report)
}
