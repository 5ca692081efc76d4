//! Two-stage training (§III-B, §V): weighted dataset sampling, AdamW with
//! linear decay, checkpointing and evaluation runs.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod run;
mod sampler;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{OptimizerConfig, Stage, TrainConfig, PAPER_BASE_LR, PAPER_STEPS_AVIAN, PAPER_STEPS_JOINT, PAPER_STEPS_MAMMAL, TABLE_III};
pub use eval::{evaluate_model, evaluate_predictions, oracle_prediction, sample_evaluation, EvaluationReport};
pub use optim::{lr_at_step, AdamW};
pub use run::{PreparedSample, StepReport, Trainer, TrainingData, TrainingSet};
pub use sampler::{weighted_sample_stream, DatasetInfo, WeightedSampler};

#[cfg(test)]
mod tests;
