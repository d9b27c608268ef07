//! SGD training, transfer between models and checkpoint files.

mod checkpoint;
mod config;
mod fit;
mod sgd;
mod transfer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
    FEATURE_MEAN, FEATURE_STD, META_FROZEN, META_SPEC, META_SPEC_DIGEST,
};
pub use config::{
    TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_FINE_TUNE_LEARNING_RATE,
    DEFAULT_LEARNING_RATE,
};
pub use fit::{accuracy, fine_tune, train, EpochRecord, FineTuneOutcome, Flow, Observer};
pub use sgd::sgd_step;
pub use transfer::{shared_prefixes, transfer_init};
