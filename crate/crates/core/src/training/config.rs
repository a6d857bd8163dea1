use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Janus,
    Mlm,
    /// Janus targets and mask with the backward stack replaced by zeros.
    JanusLeft,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Janus => "janus",
            Objective::Mlm => "mlm",
            Objective::JanusLeft => "janus_left",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "janus" => Ok(Objective::Janus),
            "mlm" => Ok(Objective::Mlm),
            "janus_left" => Ok(Objective::JanusLeft),
            other => Err(Error::Config(format!("unknown objective {other:?} (janus, mlm, janus_left)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub objective: Objective,
    pub mask_fraction: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seq_len: 128,
            peak_lr: 8e-3,
            floor_lr: 1e-6,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: 1.0,
            objective: Objective::Janus,
            mask_fraction: 0.15,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("train.steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.seq_len < 2 {
            return fail(format!("train.seq_len ({}) must be at least 2", self.seq_len));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("train.warmup_fraction ({}) must lie in (0, 1)", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return fail(format!("train.clip_norm ({}) must be positive", self.clip_norm));
        }
        if !(self.peak_lr > 0.0 && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return fail("train.peak_lr must be positive and at least train.floor_lr".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("train.eps must be positive and train.weight_decay non-negative".into());
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return fail(format!("train.mask_fraction ({}) must lie in (0, 1)", self.mask_fraction));
        }
        Ok(())
    }

    /// First step at which the schedule reaches its peak.
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64) - 1e-9).ceil().max(1.0) as usize
    }
}
