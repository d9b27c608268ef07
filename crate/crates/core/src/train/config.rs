use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_FINE_TUNE_LEARNING_RATE: f64 = 0.0001;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub fine_tune_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Dotted layer-path prefixes held fixed during fine-tuning.
    pub freeze_prefixes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            fine_tune_learning_rate: DEFAULT_FINE_TUNE_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            freeze_prefixes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !positive(self.fine_tune_learning_rate) {
            return Err(Error::Config(format!(
                "fine_tune_learning_rate must be > 0, got {}",
                self.fine_tune_learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}
