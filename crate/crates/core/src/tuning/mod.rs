//! Training engine: optimizer and schedule, tuning policies, supervised
//! training with dev-based checkpoint selection, evaluation metrics and
//! masked-LM pretraining.

mod metrics;
mod optim;
mod policy;
mod tapt;
mod train;

pub use metrics::{
    compute_metric, evaluate, evaluate_split, mean_loss, Metric, MetricValue, SplitEval,
};
pub use optim::{adam_step, lr_at, AdamConfig, OptimizerState};
pub use policy::{mixout_effective_weight, MixoutConfig, PolicyBase, TuningPolicy};
pub use tapt::{mlm_eval_loss, tapt_pretrain};
pub use train::{
    config_digest, select_checkpoint, train, EvalCadence, EvalPoint, RunRecord, Selection,
    TrainConfig,
};

/// Sequences per forward pass during evaluation.
pub(crate) const EVAL_BATCH: usize = 64;
