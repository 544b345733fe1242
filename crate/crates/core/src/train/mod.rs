//! Vanilla, query-type MAML and meta-operator training, plus test-time adaptation.

mod config;
mod data;
mod inference;
mod optim;
mod step;
mod trainer;

pub use config::{Algorithm, TrainConfig};
pub use data::{step_rngs, TrainingSet};
pub use inference::{adapt_overlays, adapt_per_template, inference_adapt, nearest_template, EvalModel};
pub use optim::OptimizerState;
pub use step::{
    adapt_operator, maml_step, mamo_step, max_relative_error, partition_residual, subset_with, train_step,
    vanilla_step, Adaptation, StepReport,
};
pub use trainer::{Checkpoint, Trainer, CHECKPOINT_FORMAT_VERSION};
