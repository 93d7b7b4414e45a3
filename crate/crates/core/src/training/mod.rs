//! Training loops, distillation, and checkpoint averaging.

mod config;
mod distill;
mod lm;
mod steps;
mod trainer;

pub use config::{Objective, TrainConfig};
pub use distill::{distill_corpus, Distilled};
pub use lm::train_lm;
pub use steps::{
    at_loss, cmlm_with_masks, first_pass, glancing_reveal_count, glat_with_predictions, masked_target_loss,
    sample_cmlm_mask, train_at_step, train_cmlm_step, train_glat_step, GlatStats, StepLoss,
};
pub use trainer::{
    select_and_average_checkpoints, token_batches, train, validation_bleu, validation_decoding, CheckpointRecord,
    LogRecord, TrainOutcome, ValidationPoint,
};
