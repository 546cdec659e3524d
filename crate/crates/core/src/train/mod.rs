//! Training on differentiable tapes: teacher, distillation pretraining and
//! binarized metric fine-tuning.

pub mod augment;
pub mod config;
pub mod graph;
pub mod losses;
pub mod optim;
mod run;

pub use config::{ScheduleKind, TrainConfig};
pub use run::{
    binary_embeddings, evaluate_recall, finetune_lambda, log_csv, pretrain_lambda, quantized_distill_loss,
    train_finetune, train_pretrain, train_teacher, LogRow, StageResult, LOG_HEADER,
};
