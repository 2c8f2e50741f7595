//! Optimization loop, dropout and epoch-level model selection.

pub mod dropout;
pub mod optim;
pub mod trainer;

pub use dropout::{apply_dropout, RunMode};
pub use optim::{adam_update, clip_global_norm, global_grad_norm, Adam, AdamConfig, Moments, OptimError};
pub use trainer::{
    accumulate_gradient, evaluate, gold_labels, predict_labels, train, EpochLog, SelectionMetric, TrainConfig,
    TrainError, TrainOutcome,
};
