//! Command implementations behind the `fatigue-rec` binary: corpus
//! synthesis, data preparation, training and evaluation.

mod commands;
mod config;
mod exposures;

pub use commands::{
    cmd_eval, cmd_grad_check, cmd_prepare, cmd_synth, cmd_train, load_instances, render_text, EvalOptions, EvalReport, PrepareStats, SplitCounts,
    GRAD_CHECK_TOLERANCE,
};
pub use config::{Paths, PrepareConfig, RunConfig, EVENTS_FILE, EXPOSURES_FILE, SPLITS_FILE, STATS_FILE};
pub use exposures::{load_exposures, save_exposures};
