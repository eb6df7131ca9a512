//! The assembled model, its losses, optimizer, training loop and
//! checkpoints.
//!
//! Every candidate of an instance (positive first) is a lane with its own
//! similarity matrix, fused long-term vector, recurrent short-term vector and
//! fatigue `f`. Its score is `y = MLP₄([h, h_T, e_t]) − tanh(f)` and the loss
//! is `L = L_rec + α·L_con`.

mod check;
mod checkpoint;
mod config;
mod network;
mod train;

pub use check::loss_gradient_check;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{Ablations, ModelConfig, TrainConfig, DEFAULT_CLIP_NORM};
pub use network::{forward_instance, rec_loss, score, total_loss, BatchOutput, Example, FRec, Mode, ScoreAndLoss, ScoreHead, BN_EPS, BN_MOMENTUM};
pub use train::{
    add_l2, clip_global_norm, score_instances, train, train_step, training_examples, Adam, EarlyStopping, HistoryRecord, RecordKind, StepResult,
    StopDecision, TrainOutcome,
};
