//! Objective, momentum updates, optimizer, schedule and the training loop.

mod collapse;
mod loss;
mod optim;
mod trainer;

pub use collapse::{collapse_metrics, CollapseMetrics};
pub use loss::{similarity_loss, similarity_loss_node, total_loss, total_loss_node};
pub use optim::{cosine_lr, ema_update, scheduled_lr, AdamState, Schedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{
    apply_bn_records, apply_ema, init_params, mix, sample_rng, train_step, StepMetrics, TrainConfig, TrainState,
    Trainer, BN_MOMENTUM, LOSS_BOUND,
};
