use std::path::{Path, PathBuf};

use resnet_asr::audio::{FeatureConfig, FeatureStats, MelExtractor};
use resnet_asr::corpus::{
    load_raw, relabel_for_binary, split, Dataset, Manifest, Mode, SynthConfig, SynthCount,
    BINARY_CLASS_NAMES, CLASS_NAMES, TEST_FRACTION,
};
use resnet_asr::eval::{compare as compare_runs, emit_report, evaluate, read_report};
use resnet_asr::nn::{prefix_matches, source_spec, target_spec, ModelSpec, ParamStore};
use resnet_asr::train::{
    self, load_checkpoint, shared_prefixes, transfer_init, Checkpoint, EpochRecord, Flow,
    TrainConfig,
};

use crate::config::{Architecture, RunConfig, Task, TrainingMode};
use crate::run_dir::{resolve_checkpoint, RunDir};
use crate::CliError;

pub const META_COMMAND: &str = "command";
pub const META_EPOCH: &str = "epoch";
pub const META_SEED: &str = "seed";
pub const META_CONFIG: &str = "config";
pub const META_FEATURES: &str = "features";
pub const META_TASK: &str = "task";
pub const META_ARCHITECTURE: &str = "architecture";

pub fn synth_corpus(out: &Path, per_class: usize, seed: u64) -> Result<(), CliError> {
    if per_class == 0 {
        return Err(CliError::Usage("--per-class must be at least 1".into()));
    }
    let cfg = SynthConfig::new(SynthCount::PerClass(per_class), seed);
    let manifest = resnet_asr::corpus::synth_corpus(out, &cfg)?;
    let parts = split(&manifest, TEST_FRACTION, seed)?;
    parts.train.write(&out.join("train.csv"))?;
    parts.test.write(&out.join("test.csv"))?;
    println!("{}", out.join("manifest.csv").display());
    println!(
        "{} files ({} train, {} test)",
        manifest.len(),
        parts.train.len(),
        parts.test.len()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Train,
    Pretrain,
    FineTune,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Train => "train",
            Kind::Pretrain => "pretrain",
            Kind::FineTune => "finetune",
        }
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Multiclass => "multiclass",
        Task::Binary => "binary",
    }
}

fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::Target => "target",
        Architecture::Source => "source",
    }
}

fn read_manifest(path: &Path, task: Task) -> Result<Manifest, CliError> {
    let m = Manifest::read(path)?;
    Ok(match task {
        Task::Multiclass => m,
        Task::Binary => relabel_for_binary(&m),
    })
}

struct Data {
    train: Dataset,
    val: Option<Dataset>,
    stats: FeatureStats,
}

/// Training and validation sets; feature statistics are fitted on the
/// training set unless `stats` is given.
fn load_data(cfg: &RunConfig, stats: Option<FeatureStats>) -> Result<Data, CliError> {
    let mut manifest = read_manifest(&cfg.paths.manifest, cfg.task)?;
    if cfg.training_mode == TrainingMode::Clean {
        manifest = manifest.filter(|r| r.mode == Mode::Clean);
    }
    if manifest.is_empty() {
        return Err(resnet_asr::Error::Manifest(format!(
            "{}: no usable training records",
            cfg.paths.manifest.display()
        ))
        .into());
    }
    let ex = MelExtractor::new(&cfg.features)?;
    let raw = load_raw(&manifest, &ex)?;
    let stats = match stats {
        Some(s) => s,
        None => FeatureStats::fit(&raw)?,
    };
    let train = Dataset::from_raw(&manifest, &raw, &stats, cfg.features.frames)?;
    let val = match &cfg.paths.val_manifest {
        Some(p) => Some(Dataset::load(&read_manifest(p, cfg.task)?, &ex, &stats)?),
        None => None,
    };
    eprintln!(
        "{} training utterances{}",
        train.len(),
        val.as_ref()
            .map(|v| format!(", {} validation", v.len()))
            .unwrap_or_default()
    );
    Ok(Data { train, val, stats })
}

fn build_spec(cfg: &RunConfig, arch: Architecture) -> Result<ModelSpec, CliError> {
    let shape = cfg.features.input_shape();
    Ok(match arch {
        Architecture::Target => target_spec(shape, cfg.num_classes())?,
        Architecture::Source => source_spec(shape, cfg.num_classes())?,
    })
}

/// Trains in a locked run directory, checkpointing every epoch.
fn fit(
    kind: Kind,
    cfg: &RunConfig,
    tc: &TrainConfig,
    arch: Architecture,
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Data,
) -> Result<(), CliError> {
    let mut run = RunDir::open(&cfg.paths.checkpoint_dir)?;
    let features = serde_json::to_string(&cfg.features).expect("features serialize");
    let mut failure: Option<CliError> = None;
    let mut observer = |rec: &EpochRecord, p: &ParamStore| -> resnet_asr::Result<Flow> {
        let ckpt = Checkpoint::from_model(spec, p, Some(&data.stats))
            .with_meta(META_COMMAND, kind.as_str())
            .with_meta(META_EPOCH, rec.epoch.to_string())
            .with_meta(META_SEED, tc.seed.to_string())
            .with_meta(META_CONFIG, cfg.echo.as_str())
            .with_meta(META_FEATURES, features.as_str())
            .with_meta(META_TASK, task_name(cfg.task))
            .with_meta(META_ARCHITECTURE, arch_name(arch));
        if let Err(e) = run.record(rec, &ckpt) {
            failure = Some(e);
            return Ok(Flow::Stop);
        }
        eprintln!(
            "epoch {:>3}  loss {:.4}{}",
            rec.epoch,
            rec.loss,
            rec.val_accuracy
                .map(|a| format!("  val {a:.2}%"))
                .unwrap_or_default()
        );
        Ok(Flow::Continue)
    };
    let val = data.val.as_ref();
    let result = match kind {
        Kind::FineTune => {
            train::fine_tune(spec, params, &data.train, val, tc, &mut observer).map(|_| ())
        }
        _ => train::train(spec, params, &data.train, val, tc, &mut observer).map(|_| ()),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(()) => {
            if let (Some(dir), Some(val)) = (&cfg.paths.report_dir, &data.val) {
                let names = match cfg.task {
                    Task::Multiclass => CLASS_NAMES.to_vec(),
                    Task::Binary => BINARY_CLASS_NAMES.to_vec(),
                };
                let names = names.into_iter().map(String::from).collect();
                let report = evaluate(spec, params, val, names)?;
                emit_report(&report, dir)?;
                eprintln!(
                    "validation accuracy {:.2}% -> {}",
                    report.accuracy,
                    dir.display()
                );
            }
            println!("{}", run.path().display());
            Ok(())
        }
        Err(e @ resnet_asr::Error::Diverged { .. }) => {
            eprintln!(
                "last good checkpoint: {}",
                run.path().join(crate::run_dir::LATEST).display()
            );
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn train(config: &Path, kind: Kind) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let arch = match kind {
        Kind::Pretrain => cfg.pretrain_architecture,
        _ => Architecture::Target,
    };
    let spec = build_spec(&cfg, arch)?;
    let mut params = ParamStore::init(&spec, cfg.seed)?;
    let data = load_data(&cfg, None)?;
    fit(
        kind,
        &cfg,
        &cfg.train_config(),
        arch,
        &spec,
        &mut params,
        &data,
    )
}

pub fn finetune(config: &Path, from: &Path, freeze: Option<Vec<String>>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let src = load_checkpoint(&resolve_checkpoint(from)?)?;
    let src_params = src.params()?;
    let spec = build_spec(&cfg, Architecture::Target)?;
    let mut params = ParamStore::init(&spec, cfg.seed)?;
    let map = shared_prefixes(&src_params, &params);
    let copied = transfer_init(&src_params, &mut params, &map)?;
    if copied == 0 {
        eprintln!(
            "warning: {} shares no tensors with the target network",
            from.display()
        );
    } else {
        let groups: Vec<&str> = map.iter().map(|(s, _)| s.as_str()).collect();
        eprintln!("transferred {copied} tensors ({})", groups.join(", "));
    }

    let mut tc = cfg.train_config();
    if let Some(f) = freeze {
        tc.freeze_prefixes = f;
    }
    for p in &tc.freeze_prefixes {
        if !params.names().any(|n| prefix_matches(p, n)) {
            eprintln!("warning: freeze prefix `{p}` matches no tensors");
        }
    }

    let stats = src
        .feature_stats()
        .filter(|s| s.mean.len() == cfg.features.n_mels);
    let data = load_data(&cfg, stats)?;
    fit(
        Kind::FineTune,
        &cfg,
        &tc,
        Architecture::Target,
        &spec,
        &mut params,
        &data,
    )
}

pub fn eval(
    ckpt: &Path,
    manifest: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&resolve_checkpoint(ckpt)?)?;
    let spec = ckpt.spec()?;
    if let Some(c) = config {
        let cfg = RunConfig::load(c)?;
        let arch = match ckpt.meta(META_ARCHITECTURE) {
            Some("source") => Architecture::Source,
            _ => Architecture::Target,
        };
        let expected = build_spec(&cfg, arch)?;
        if expected.digest() != spec.digest() {
            return Err(CliError::Usage(format!(
                "spec digest mismatch: checkpoint {} vs config {}",
                spec.digest(),
                expected.digest()
            )));
        }
    }
    let params = ckpt.params()?;
    let features: FeatureConfig = match ckpt.meta(META_FEATURES) {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| resnet_asr::Error::Checkpoint(format!("bad feature metadata: {e}")))?,
        None => FeatureConfig::default(),
    };
    let task = match ckpt.meta(META_TASK) {
        Some("binary") => Task::Binary,
        _ => Task::Multiclass,
    };
    let m = read_manifest(manifest, task)?;
    if m.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no records",
            manifest.display()
        )));
    }
    let stats = ckpt
        .feature_stats()
        .unwrap_or_else(|| FeatureStats::identity(features.n_mels));
    let ds = Dataset::load(&m, &MelExtractor::new(&features)?, &stats)?;
    let report = evaluate(&spec, &params, &ds, m.class_names())?;
    emit_report(&report, out)?;
    println!(
        "accuracy {:.2}%  WER {:.2}%  ({} of {})",
        report.accuracy, report.wer, report.correct, report.total
    );
    Ok(())
}

pub fn compare(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        reports.push((name, read_report(&dir.join("report.json"))?));
    }
    for row in compare_runs(&reports, out)? {
        println!(
            "{:<20} {:>8.2}% accuracy  {:>6.2}% WER",
            row.run, row.accuracy, row.wer
        );
    }
    Ok(())
}
