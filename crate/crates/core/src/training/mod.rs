//! Losses, optimizer, dataset loading and the three-stage schedule.

pub mod data;
pub mod loss;
pub mod optim;
pub mod stage;

pub use data::{load_examples, vocabulary_corpus, DatasetRow};
pub use loss::{caption_loss, question_loss, sequence_loss};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use stage::{
    compose_fine_tune_init, run_stage, CaptionFeatures, Example, LossPoint, mean_loss, Objective, Schedule, Stage, StageOutcome, StagePlan,
    TrainConfig,
};
