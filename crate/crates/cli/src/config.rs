use std::path::{Path, PathBuf};

use resnet_asr::audio::FeatureConfig;
use resnet_asr::train::{
    TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_FINE_TUNE_LEARNING_RATE,
    DEFAULT_LEARNING_RATE,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "RESNET_ASR_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Multiclass,
    Binary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    Clean,
    #[default]
    Multicondition,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training manifest.
    pub manifest: PathBuf,
    /// Held-out manifest scored after every epoch.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    /// Run directory: checkpoints, `latest`, `history.csv`, lock file.
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ft_lr")]
    pub fine_tune_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub freeze_prefixes: Vec<String>,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub training_mode: TrainingMode,
    /// Network trained by `pretrain`; `train` and `finetune` always use the target.
    #[serde(default)]
    pub pretrain_architecture: Architecture,
    pub paths: Paths,
    #[serde(default)]
    pub features: FeatureConfig,
    /// Canonical TOML with paths as written, stored in checkpoints.
    #[serde(skip)]
    pub echo: String,
}

fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_ft_lr() -> f64 {
    DEFAULT_FINE_TUNE_LEARNING_RATE
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}

impl RunConfig {
    /// Parses TOML; relative paths are taken from `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.echo = toml::to_string(&cfg).expect("config serializes");
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.checkpoint_dir] {
            *p = base.join(&*p);
        }
        for p in [&mut cfg.paths.val_manifest, &mut cfg.paths.report_dir]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
        cfg.train_config().validate()?;
        cfg.features.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base)?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not a u64")))?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            fine_tune_learning_rate: self.fine_tune_learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            freeze_prefixes: self.freeze_prefixes.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Multiclass => resnet_asr::corpus::NUM_CLASSES,
            Task::Binary => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[paths]\nmanifest = \"m.csv\"\ncheckpoint_dir = \"run\"\n";

    #[test]
    fn defaults() {
        let c = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.fine_tune_learning_rate, 0.0001);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.task, Task::Multiclass);
        assert_eq!(c.training_mode, TrainingMode::Multicondition);
        assert_eq!(c.paths.manifest, Path::new("/base/m.csv"));
        assert_eq!(c.features, FeatureConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = RunConfig::parse(&format!("lr = 0.1\n{MINIMAL}"), Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown field `lr`"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
        let err = RunConfig::parse(&format!("{MINIMAL}[features]\nmels = 3\n"), Path::new("."))
            .unwrap_err();
        assert!(err.to_string().contains("mels"));
    }

    #[test]
    fn missing_paths_and_bad_values() {
        assert!(RunConfig::parse("epochs = 3\n", Path::new(".")).is_err());
        let e = RunConfig::parse(&format!("batch_size = 1\n{MINIMAL}"), Path::new("."));
        assert!(matches!(
            e,
            Err(CliError::Core(resnet_asr::Error::Config(_)))
        ));
        let e = RunConfig::parse(&format!("task = \"ternary\"\n{MINIMAL}"), Path::new("."));
        assert!(matches!(e, Err(CliError::Usage(_))));
    }

    #[test]
    fn echo_round_trips() {
        let text = format!("task = \"binary\"\ntraining_mode = \"clean\"\nfreeze_prefixes = [\"stem\"]\n{MINIMAL}[features]\nn_mels = 20\nframes = 32\n");
        let c = RunConfig::parse(&text, Path::new("/")).unwrap();
        assert_eq!(c.num_classes(), 2);
        assert!(c.echo.contains("checkpoint_dir = \"run\""));
        let back = RunConfig::parse(&c.echo, Path::new("/")).unwrap();
        assert_eq!(back, c);
    }
}
