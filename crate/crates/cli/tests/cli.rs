use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resnet_asr::train::load_checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_resnet-asr"));
    c.env_remove("RESNET_ASR_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path) -> PathBuf {
    corpus_of(dir, 3)
}

fn corpus_of(dir: &Path, per_class: usize) -> PathBuf {
    let out = dir.join("corpus");
    let n = per_class.to_string();
    let o = run(&[
        "synth-corpus",
        "--out",
        p(&out),
        "--per-class",
        &n,
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

/// 16x16 canvas, batch 8, two epochs unless `extra` sets them.
fn write_config(dir: &Path, name: &str, run_dir: &str, extra: &str) -> PathBuf {
    let epochs = if extra.contains("epochs") {
        ""
    } else {
        "epochs = 2\n"
    };
    let text = format!(
        "{epochs}batch_size = 8\n{extra}\n[paths]\nmanifest = \"corpus/train.csv\"\nval_manifest = \"corpus/test.csv\"\ncheckpoint_dir = \"{run_dir}\"\n\n[features]\nn_mels = 16\nframes = 16\n"
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn train(cfg: &Path) -> Output {
    let o = run(&["train", "--config", p(cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

#[test]
fn synth_corpus_outputs_and_rerun() {
    let d = tempfile::tempdir().unwrap();
    let a = corpus(d.path());
    let wavs = |sub: &str| fs::read_dir(a.join(sub)).unwrap().count();
    assert_eq!(wavs("clean"), 33);
    assert_eq!(wavs("noisy"), 33);
    let manifest = fs::read(a.join("manifest.csv")).unwrap();
    let lines = |f: &str| fs::read_to_string(a.join(f)).unwrap().lines().count() - 1;
    assert_eq!(lines("train.csv") + lines("test.csv"), 66);

    let b = d.path().join("again");
    let o = run(&[
        "synth-corpus",
        "--out",
        p(&b),
        "--per-class",
        "3",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(b.join("manifest.csv")).unwrap(), manifest);
    assert!(String::from_utf8_lossy(&o.stdout).contains("66 files"));
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["synth-corpus", "--out", p(d.path()), "--per-class", "0"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["bogus"])), 2);

    let cfg = d.path().join("bad.toml");
    fs::write(
        &cfg,
        "epochs = 2\nlearning_rat = 0.1\n[paths]\nmanifest = \"m\"\ncheckpoint_dir = \"r\"\n",
    )
    .unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(
        msg.contains("learning_rat") && msg.contains("line 2"),
        "{msg}"
    );

    fs::write(
        &cfg,
        "batch_size = 1\n[paths]\nmanifest = \"m\"\ncheckpoint_dir = \"r\"\n",
    )
    .unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&cfg)])), 2);
}

#[test]
fn data_errors_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "run", "");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(&[
        "eval",
        "--ckpt",
        p(&d.path().join("missing.ckpt")),
        "--manifest",
        p(&d.path().join("m.csv")),
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergence_exits_4_and_keeps_last_good_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let cfg = write_config(d.path(), "c.toml", "run", "learning_rate = 1e30");
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(!d.path().join("run/run.lock").exists());
}

#[test]
fn train_writes_run_directory_deterministically() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let cfg = write_config(d.path(), "c.toml", "run", "");
    train(&cfg);
    let run_dir = d.path().join("run");
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().collect();
    assert_eq!(rows[0], "epoch,loss,val_accuracy");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("2,"));
    assert_eq!(rows[2].split(',').count(), 3);
    assert_eq!(
        fs::read_to_string(run_dir.join("latest")).unwrap(),
        "epoch-0002.ckpt\n"
    );
    assert!(!run_dir.join("run.lock").exists());
    let ck = load_checkpoint(&run_dir.join("epoch-0002.ckpt")).unwrap();
    assert_eq!(ck.meta("epoch"), Some("2"));
    assert_eq!(ck.meta("seed"), Some("0"));
    assert!(ck.feature_stats().is_some());

    let first: Vec<Vec<u8>> = ["history.csv", "epoch-0001.ckpt", "epoch-0002.ckpt"]
        .iter()
        .map(|f| fs::read(run_dir.join(f)).unwrap())
        .collect();
    train(&cfg);
    for (f, bytes) in ["history.csv", "epoch-0001.ckpt", "epoch-0002.ckpt"]
        .iter()
        .zip(&first)
    {
        assert_eq!(&fs::read(run_dir.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn seed_override_from_environment() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let cfg = write_config(d.path(), "c.toml", "run", "epochs = 1");
    let o = bin()
        .args(["train", "--config", p(&cfg)])
        .env("RESNET_ASR_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = load_checkpoint(&d.path().join("run/epoch-0001.ckpt")).unwrap();
    assert_eq!(ck.meta("seed"), Some("17"));

    let o = bin()
        .args(["train", "--config", p(&cfg)])
        .env("RESNET_ASR_SEED", "seventeen")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn locked_run_directory_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let cfg = write_config(d.path(), "c.toml", "run", "");
    fs::create_dir_all(d.path().join("run")).unwrap();
    fs::write(d.path().join("run/run.lock"), "1\n").unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn clean_training_then_noisy_evaluation() {
    let d = tempfile::tempdir().unwrap();
    let c = corpus_of(d.path(), 16);
    let cfg = write_config(d.path(), "c.toml", "run", "training_mode = \"clean\"");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "checkpoint_dir = \"run\"\n",
        "checkpoint_dir = \"run\"\nreport_dir = \"val_report\"\n",
    );
    fs::write(&cfg, text).unwrap();
    train(&cfg);
    let val = resnet_asr::eval::read_report(&d.path().join("val_report/report.json")).unwrap();
    assert_eq!(
        val.total,
        fs::read_to_string(c.join("test.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    );
    let out = d.path().join("report");
    let o = run(&[
        "eval",
        "--ckpt",
        p(&d.path().join("run")),
        "--manifest",
        p(&c.join("test.csv")),
        "--out",
        p(&out),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("mode,noise_type,snr_db,count,correct,accuracy_pct\n"));
    for snr in ["20", "15", "10", "5"] {
        assert!(
            metrics
                .lines()
                .any(|l| l.starts_with("noisy,") && l.split(',').nth(2) == Some(snr)),
            "no {snr} dB row in\n{metrics}"
        );
    }
    let report = resnet_asr::eval::read_report(&out.join("report.json")).unwrap();
    assert_eq!(report.accuracy, report.accuracy_from_confusion());
    assert_eq!(report.confusion, val.confusion);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains(&format!("{:.2}%", report.accuracy)),
        "{stdout}"
    );
    assert_eq!(
        fs::read_to_string(out.join("confusion.csv"))
            .unwrap()
            .lines()
            .count(),
        12
    );
}

#[test]
fn eval_rejects_empty_manifest_and_foreign_config() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let cfg = write_config(d.path(), "c.toml", "run", "epochs = 1");
    train(&cfg);
    let ckpt = d.path().join("run/epoch-0001.ckpt");
    let empty = d.path().join("empty.csv");
    fs::write(&empty, "path,label,mode,noise_type,snr_db\n").unwrap();
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&empty),
        "--out",
        p(&d.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);

    let other = write_config(d.path(), "other.toml", "run2", "");
    let text = fs::read_to_string(&other)
        .unwrap()
        .replace("n_mels = 16", "n_mels = 20");
    fs::write(&other, text).unwrap();
    let o = run(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&d.path().join("corpus/test.csv")),
        "--out",
        p(&d.path().join("o")),
        "--config",
        p(&other),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("digest mismatch"));
}

#[test]
fn finetune_freezes_and_warns() {
    let d = tempfile::tempdir().unwrap();
    corpus(d.path());
    let pre = write_config(d.path(), "pre.toml", "pre", "training_mode = \"clean\"");
    let o = run(&["pretrain", "--config", p(&pre)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ft = write_config(d.path(), "ft.toml", "ft", "freeze_prefixes = [\"stem\"]");

    let o = run(&[
        "finetune",
        "--config",
        p(&ft),
        "--from",
        p(&d.path().join("pre")),
        "--freeze",
        "stem",
        "block1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("transferred"));
    let src = load_checkpoint(&d.path().join("pre/epoch-0002.ckpt")).unwrap();
    let dst = load_checkpoint(&d.path().join("ft/epoch-0002.ckpt")).unwrap();
    let mut frozen = 0;
    for (name, t) in &src.tensors {
        let after = dst.tensor(name).unwrap();
        if name.starts_with("stem.") || name.starts_with("block1.") {
            assert_eq!(after, t, "{name}");
            frozen += 1;
        }
    }
    assert!(frozen > 6);
    assert_ne!(src.tensor("head.weight"), dst.tensor("head.weight"));
    assert_eq!(dst.meta("command"), Some("finetune"));
    assert_eq!(src.tensor("features.mean"), dst.tensor("features.mean"));

    let o = run(&[
        "finetune",
        "--config",
        p(&ft),
        "--from",
        p(&d.path().join("pre")),
        "--freeze",
        "nothing.here",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: freeze prefix `nothing.here` matches no tensors"));
}

#[test]
fn compare_merges_runs() {
    let d = tempfile::tempdir().unwrap();
    let c = corpus(d.path());
    let a = write_config(d.path(), "a.toml", "a", "epochs = 1\nseed = 1");
    let b = write_config(d.path(), "b.toml", "b", "epochs = 1\nseed = 2");
    for (cfg, out) in [(&a, "eval_a"), (&b, "eval_b")] {
        train(cfg);
        let run_dir = d.path().join(&out[5..]);
        let o = run(&[
            "eval",
            "--ckpt",
            p(&run_dir),
            "--manifest",
            p(&c.join("test.csv")),
            "--out",
            p(&d.path().join(out)),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let out = d.path().join("cmp");
    let o = run(&[
        "compare",
        "--runs",
        p(&d.path().join("eval_a")),
        p(&d.path().join("eval_b")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("eval_a,") && rows[2].starts_with("eval_b,"));
    let svg = fs::read_to_string(out.join("wer.svg")).unwrap();
    assert_eq!(svg.matches("class=\"group\"").count(), 2);

    assert_eq!(code(&run(&["compare", "--out", p(&out)])), 2);
    let o = run(&[
        "compare",
        "--runs",
        p(&d.path().join("nope")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
}
