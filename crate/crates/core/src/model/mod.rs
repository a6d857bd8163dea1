//! Causal encoder stacks, fusion attention and output head.

mod blocks;
mod config;
mod janus;
mod params;
#[cfg(test)]
mod tests;

pub use blocks::{
    aux_loss, aux_loss_tape, causal_mask, route_top1, AttentionBlock, FfnBlock, FfnWeights, MoeBlock, MoeRecord,
    RecurrenceBlock, RouterStats, Routing,
};
pub use config::{FusionBias, MidAttention, ModelConfig, MAX_RELATIVE_DISTANCE};
pub use janus::{
    reversal, Channel, Direction, DirectionalStates, Encoded, EncoderStack, FusionBlock, Head, JanusModel, Layer,
    Mixer, ParamAudit,
};
pub use params::{Param, ParamId, ParamKind, ParamStore};
