//! Interaction logs, per-user sequences, chronological splits, negative
//! sampling and a synthetic corpus with repetition fatigue.

mod interactions;
mod sequence;
mod synthetic;

pub use interactions::{apply_k_core, load_interactions, save_interactions, write_interactions, Event, InteractionLog, LOG_HEADER};
pub use sequence::{
    build_instances, build_sequences, chronological_split, compute_m_proxy, load_split_file, prepare_splits, sample_negatives,
    save_split_file, write_split_file, ItemCatalog, ItemSequence, LabeledSequence, Split, SplitRatios, TrainingInstance,
    EVAL_NEGATIVES, M_PROXY_HORIZON, TRAIN_NEGATIVES,
};
pub use synthetic::{generate_synthetic, simulate_exposures, Exposures, SyntheticConfig, EPOCH_START, STEP_SECONDS};
