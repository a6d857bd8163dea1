//! Pretraining objectives, AdamW with warmup-cosine schedule, the training
//! loop, metrics and checkpoints.

mod checkpoint;
mod config;
mod data;
mod loss;
mod optim;
mod trainer;
mod verify;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Extension, RngState,
    TrainState, MAGIC, VERSION,
};
pub use config::{Objective, TrainConfig};
pub use data::{test_seed, Corpus, DataConfig};
pub use loss::{
    draw_mask_positions, janus_loss, janus_loss_masked, mask_count, mean_position_logits, mlm_loss, FlatBatch,
    InstanceLoss, LossOutput,
};
pub use optim::{adamw_step, clip_gradients, lr_at, AdamHyper, AdamState};
pub use trainer::{metrics_csv, read_metrics, MetricRow, MetricsWriter, Trainer};
pub use verify::{micro_config, model_grad_check};
