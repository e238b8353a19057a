//! Optimizer, schedule, checkpoints and the train / evaluate / infer loops.

pub mod ablation;
mod checkpoint;
mod config;
mod infer;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, ParamEntry, MANIFEST_FILE, PAYLOAD_FILE, VOCAB_FILE};
pub use config::{RunConfig, Schedule};
pub use infer::{infer, infer_pixels, Inference};
pub use optim::Adam;
pub use trainer::{
    best_checkpoint_path, evaluate, evaluate_samples, init_checkpoint, predict, train, train_on,
    EpochLog, TrainSummary, BEST_DIR, LAST_GOOD_DIR, LOG_FILE,
};
