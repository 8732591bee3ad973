//! Draft-head training: staircase alignment masks, the Top-K
//! distillation loss, the feature-regression and soft-label base losses,
//! dataset construction and the training loop.

mod aligned;
mod alignment;
mod config;
mod dataset;
mod loss;
mod optim;
mod train;

pub use aligned::{batch_loss_and_grads, batch_loss_value, hass_forward_pass, AlignedOutput, Batch, ForwardStats};
pub use alignment::{build_alignment_mask, AlignmentPlan};
pub use config::{DataMode, TrainConfig};
pub use dataset::{build_dataset, sample_continuation, window_starts, Dataset, DatasetOptions, TargetDist, TrainingExample};
pub use loss::{
    eagle_base_loss, smooth_l1, soft_cross_entropy, top_k_indices, top_k_loss, LossTerms, LossWeights, SMOOTH_L1_BETA,
    TOP_K_LOG_CLAMP,
};
pub use optim::{clip_grad_norm, learning_rate, AdamW};
pub use train::{train_draft, EpochLog, ForwardLog};
