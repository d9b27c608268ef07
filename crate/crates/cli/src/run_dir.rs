use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use resnet_asr::train::{save_checkpoint, Checkpoint, EpochRecord};

use crate::CliError;

pub const LOCK_FILE: &str = "run.lock";
pub const LATEST: &str = "latest";
pub const HISTORY: &str = "history.csv";
pub const HISTORY_HEADER: &str = "epoch,loss,val_accuracy";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(resnet_asr::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Exclusive handle on a run directory, released on drop.
pub struct RunDir {
    dir: PathBuf,
    history: String,
}

impl RunDir {
    /// Locks `dir` and clears outputs of any earlier run in it.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Usage(format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    dir.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(io(&lock, e)),
        }
        let run = Self {
            dir: dir.to_path_buf(),
            history: format!("{HISTORY_HEADER}\n"),
        };
        for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let path = entry.map_err(|e| io(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let stale = name == LATEST
                || name == HISTORY
                || (name.starts_with("epoch-") && name.ends_with(".ckpt"));
            if stale {
                fs::remove_file(&path).map_err(|e| io(&path, e))?;
            }
        }
        run.write_history()?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Saves the epoch checkpoint, repoints `latest` and appends to the history.
    pub fn record(&mut self, rec: &EpochRecord, ckpt: &Checkpoint) -> Result<(), CliError> {
        let name = checkpoint_name(rec.epoch);
        save_checkpoint(ckpt, &self.dir.join(&name))?;
        let latest = self.dir.join(LATEST);
        let tmp = self.dir.join(format!("{LATEST}.tmp"));
        fs::write(&tmp, format!("{name}\n")).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &latest).map_err(|e| io(&latest, e))?;
        let val = rec
            .val_accuracy
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        self.history
            .push_str(&format!("{},{:.8},{val}\n", rec.epoch, rec.loss));
        self.write_history()
    }

    fn write_history(&self) -> Result<(), CliError> {
        let p = self.dir.join(HISTORY);
        fs::write(&p, &self.history).map_err(|e| io(&p, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

/// Resolves a checkpoint argument: a file, or a run directory's `latest`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, CliError> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join(LATEST);
    let name = fs::read_to_string(&latest).map_err(|e| io(&latest, e))?;
    Ok(path.join(name.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_open_is_rejected_until_drop() {
        let d = tempfile::tempdir().unwrap();
        let first = RunDir::open(d.path()).unwrap();
        assert!(matches!(RunDir::open(d.path()), Err(CliError::Usage(_))));
        drop(first);
        assert!(!d.path().join(LOCK_FILE).exists());
        RunDir::open(d.path()).unwrap();
    }

    #[test]
    fn reopening_clears_old_outputs() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("epoch-0009.ckpt"), b"x").unwrap();
        fs::write(d.path().join("notes.txt"), b"keep").unwrap();
        let run = RunDir::open(d.path()).unwrap();
        assert!(!d.path().join("epoch-0009.ckpt").exists());
        assert!(d.path().join("notes.txt").exists());
        assert_eq!(
            fs::read_to_string(run.path().join(HISTORY)).unwrap(),
            "epoch,loss,val_accuracy\n"
        );
    }
}
