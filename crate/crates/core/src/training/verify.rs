use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::build_mask;
use crate::model::{JanusModel, MidAttention, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, ValueGrid};

use super::loss::{janus_loss_masked, FlatBatch};

/// Smallest model that exercises every block type: recurrence, causal
/// attention, FFN, a 4-expert MoE layer and fusion.
pub fn micro_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_experts: 4,
        n_heads: 2,
        mid_attention: MidAttention::Layer(0),
        seed,
        ..ModelConfig::default()
    }
}

/// Central-difference check of the full Janus loss (cross-entropy plus MoE
/// auxiliary term) with respect to every parameter, at 64-bit precision.
pub fn model_grad_check(config: &ModelConfig, seq_len: usize, h: f64) -> Result<GradCheckReport> {
    let model = JanusModel::<f64>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    let ids: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..4)).collect();
    let batch = FlatBatch::new(ids, seq_len)?;
    let mask = build_mask(seq_len)?;
    let mut params: Vec<ValueGrid<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
    grad_check(&mut params, |tape, vars| Ok(janus_loss_masked(&model, tape, vars, &batch, true, &mask)?.total), h)
}
