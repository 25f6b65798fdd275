//! Loss functions, the optimizer and the joint training loop.

pub mod example;
pub mod losses;
pub mod optim;
mod train;

pub use example::{example_loss, prepare_example, BoundModels, Example};
pub use losses::{
    contrastive_terms, loss_ctr, loss_mml, loss_nll, total_loss, ContrastiveTerms, LossTerms,
    LossWeights,
};
pub use optim::{clip_grad_norm, linear_decay, AdamW, OptimizerConfig};
pub use train::{
    log_to_csv, train, validate_models, write_log_csv, StepLog, TrainConfig, TrainOutcome,
};
