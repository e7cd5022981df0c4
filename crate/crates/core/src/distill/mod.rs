//! Teacher→student distillation: the KL objective with a feature penalty,
//! AdamW with an epoch-wise warmup/decay schedule, and the training loop.

mod loss;
mod optim;
mod train;

pub use loss::{
    feature_penalty, kl_distill_loss, objective, objective_tape, LossBreakdown, ObjectiveConfig, ProbSeq,
    PROB_FLOOR,
};
pub use optim::{adamw_step, AdamConfig, AdamState, LrSchedule};
pub use train::{distill, evaluate_wer, lr_at, write_history, DistillConfig, DistillOutcome, EpochRecord};
