//! Optimization, the training loop, checkpoints and the command helpers.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod sample;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{TrainConfig, LR_GRID};
pub use gradcheck::{all_flow_kinds, gradcheck_elbo, GradCheckDims, GRADCHECK_TOL};
pub use sample::{pgm_grid, prior_means};
pub use trainer::{
    evaluate, evaluate_model, load_splits, sweep_learning_rates, train, train_on, EpochMetrics, EvalReport,
    RunReport, METRICS_HEADER,
};
