//! Attention classifier with frozen square projections, adapter composition,
//! unlearning losses and training loops.

mod adapters;
mod eval;
pub mod gradcheck;
mod loss;
mod model;
mod optim;
mod train;

pub use adapters::{adapted_weights, AdapterStack, Composition, RequestAdapters, UpdateKind};
pub use eval::{evaluate, evaluate_per_input, evaluate_weights, forward, forward_weights, predict};
pub use loss::{ce_unlearn_loss, overall_loss, OverallLoss, TargetPolicy, UnlearnBatch};
pub use model::{log_softmax_rows, AttentionBlock, EffectiveWeights, ForwardCache, ModelGrads, ToyAttentionModel, ToyModelShape};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{pretrain, train_request, LogEntry, PretrainConfig, RequestObjective, TrainConfig, TrainingLog};
