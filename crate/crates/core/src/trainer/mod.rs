//! AdamW, cosine annealing, class-balanced sampling and early stopping.

mod adamw;
mod fit;
mod sampler;
mod schedule;

pub use adamw::{adamw_step, AdamWHyper, OptimizerState};
pub use fit::{evaluate_loss, fit, EpochRecord, Sample, StopReason, TrainConfig, TrainLog};
pub use sampler::{inverse_frequency_weights, weighted_sampler, WeightedSampler};
pub use schedule::{cosine_lr, EarlyStopping};
